fn main() {
    std::process::exit(stylebc::cli::main_with_args(std::env::args_os()));
}
