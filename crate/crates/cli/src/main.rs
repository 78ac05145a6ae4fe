fn main() {
    std::process::exit(trustal_cli::main_with_args(std::env::args_os()));
}
