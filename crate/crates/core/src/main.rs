fn main() {
    std::process::exit(dynaseg::cli::main());
}
