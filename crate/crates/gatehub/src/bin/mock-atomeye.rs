fn main() {
    std::process::exit(gatehub::stub::run(gatehub::stub::Tool::AtomEye, std::env::args_os()));
}
