fn main() {
    std::process::exit(pepsi::cli::main_with_args(std::env::args_os()));
}
