fn main() {
    std::process::exit(mtorus::cli::run_from(std::env::args_os()));
}
