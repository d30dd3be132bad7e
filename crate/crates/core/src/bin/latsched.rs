fn main() {
    std::process::exit(latsched::cli::run(std::env::args_os()));
}
