fn main() {
    std::process::exit(ttsa_lab::main_with_args(std::env::args_os()));
}
