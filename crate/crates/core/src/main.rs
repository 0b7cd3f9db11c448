fn main() {
    std::process::exit(subword_lm::cli::run(std::env::args_os()));
}
