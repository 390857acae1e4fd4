fn main() {
    std::process::exit(factlab::run_cli());
}
