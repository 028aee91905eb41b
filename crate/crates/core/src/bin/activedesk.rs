fn main() {
    activedesk::cli::main();
}
