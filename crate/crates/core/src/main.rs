fn main() {
    std::process::exit(microchain_lab::cli::main_with_args(std::env::args_os()));
}
