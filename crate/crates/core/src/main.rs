fn main() {
    std::process::exit(fdrec::cli::run(std::env::args_os()));
}
