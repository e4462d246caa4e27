fn main() {
    cc2d::cli::main_with_exit()
}
