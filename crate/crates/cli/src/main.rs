fn main() {
    std::process::exit(spxtrack_cli::main_with_args(std::env::args_os()));
}
