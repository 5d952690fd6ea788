fn main() {
    std::process::exit(c2c_cli::main_with_args(std::env::args_os()));
}
