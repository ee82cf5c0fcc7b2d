fn main() {
    std::process::exit(douc::cli::main_from(std::env::args_os()));
}
