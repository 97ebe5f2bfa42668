fn main() {
    std::process::exit(qdecomp::cli::main());
}
