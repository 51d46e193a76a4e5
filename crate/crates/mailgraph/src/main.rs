fn main() {
    std::process::exit(mailgraph::cli::main());
}
