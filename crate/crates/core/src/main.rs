fn main() {
    std::process::exit(nextloc::harness::cli::run(std::env::args_os()));
}
