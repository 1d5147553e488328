fn main() {
    std::process::exit(pignn::cli::run(std::env::args_os()));
}
