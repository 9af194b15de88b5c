fn main() {
    std::process::exit(egocap::cli::run(std::env::args_os()));
}
