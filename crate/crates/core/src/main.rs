fn main() {
    std::process::exit(semifreddo::cli::run_command(std::env::args_os()));
}
