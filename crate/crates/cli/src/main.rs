// SPDX-License-Identifier: MIT OR Apache-2.0

fn main() -> anyhow::Result<()> {
    let dir = dstg_cli::main_with(std::env::args_os())?;
    println!("{}", dir.display());
    Ok(())
}
