fn main() {
    std::process::exit(dcnet::cli::main_with_args(std::env::args_os()));
}
