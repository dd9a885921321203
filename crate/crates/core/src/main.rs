fn main() {
    std::process::exit(qadwh::cli::run(std::env::args_os()));
}
