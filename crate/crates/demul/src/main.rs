fn main() {
    std::process::exit(demul::cli::main_with_args(std::env::args_os()));
}
