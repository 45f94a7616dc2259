fn main() {
    std::process::exit(rsmp_cli::run(std::env::args_os()));
}
