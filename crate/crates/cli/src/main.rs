fn main() {
    std::process::exit(walkdiff::run(std::env::args_os()));
}
