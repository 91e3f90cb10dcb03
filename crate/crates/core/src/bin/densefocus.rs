fn main() {
    std::process::exit(densefocus::cli::main_with_args(std::env::args_os()));
}
