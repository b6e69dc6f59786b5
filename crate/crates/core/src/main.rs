fn main() {
    std::process::exit(pvwatch::cli::run(std::env::args_os()));
}
