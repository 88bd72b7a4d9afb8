fn main() {
    std::process::exit(geoedit::cli::main_with_args(std::env::args_os()));
}
