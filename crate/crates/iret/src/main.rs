fn main() {
    std::process::exit(iret::cli::run(std::env::args_os()));
}
