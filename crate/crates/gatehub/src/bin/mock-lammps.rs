fn main() {
    std::process::exit(gatehub::stub::run(gatehub::stub::Tool::Lammps, std::env::args_os()));
}
