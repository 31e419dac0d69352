fn main() {
    conformal_decode::cli::main()
}
