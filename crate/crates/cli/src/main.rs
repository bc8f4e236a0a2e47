fn main() {
    std::process::exit(abound_cli::run_command(std::env::args_os()));
}
