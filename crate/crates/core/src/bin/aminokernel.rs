fn main() {
    std::process::exit(aminokernel::cli::run(std::env::args_os()));
}
