fn main() {
    std::process::exit(broker_cli::cli::main_with(std::env::args_os()));
}
