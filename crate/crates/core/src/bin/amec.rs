fn main() {
    amec_core::cli::main();
}
