fn main() {
    dme::cli::main()
}
