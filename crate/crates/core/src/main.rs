fn main() {
    std::process::exit(scpt_core::cli::run(std::env::args_os()));
}
