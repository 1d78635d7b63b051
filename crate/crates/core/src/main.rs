fn main() {
    std::process::exit(gridsage::cli::run(std::env::args_os()));
}
