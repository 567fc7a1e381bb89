fn main() {
    std::process::exit(querysep::harness::run(std::env::args_os()));
}
