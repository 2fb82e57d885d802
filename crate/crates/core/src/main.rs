fn main() -> anyhow::Result<()> {
    eventpipe::cli::main()
}
