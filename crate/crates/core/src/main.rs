fn main() {
    std::process::exit(primnav::evalcli::cli_main());
}
