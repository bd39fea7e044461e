fn main() {
    std::process::exit(lcmflow::cli::run(std::env::args_os()));
}
