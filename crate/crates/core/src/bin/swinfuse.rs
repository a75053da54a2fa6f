fn main() {
    std::process::exit(swinfuse::cli::main())
}
