fn main() -> anyhow::Result<()> {
    one2all::cli_unavailable()
}
