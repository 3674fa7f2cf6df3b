fn main() {
    std::process::exit(costfilter::cli::run(std::env::args_os()));
}
