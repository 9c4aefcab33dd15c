fn main() {
    std::process::exit(optiflow::cli::main());
}
