fn main() {
    std::process::exit(derfl::cli::execute(std::env::args_os()));
}
