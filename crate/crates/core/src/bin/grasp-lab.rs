fn main() {
    std::process::exit(grasp_lab::insight::cli::run(std::env::args_os()));
}
