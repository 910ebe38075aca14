fn main() {
    diracqc::runner::cli_main();
}
