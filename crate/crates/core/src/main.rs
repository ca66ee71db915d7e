fn main() {
    std::process::exit(mdm::cli::main());
}
