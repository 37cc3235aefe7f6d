fn main() {
    std::process::exit(panelbot_cli::main_with_args(std::env::args_os()));
}
