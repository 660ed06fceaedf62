fn main() {
    lofa_cli::run();
}
