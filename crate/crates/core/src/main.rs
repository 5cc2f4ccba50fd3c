fn main() {
    std::process::exit(coldrec::cli::main_with_args(std::env::args_os()));
}
