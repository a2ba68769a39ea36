// mdbook cannot run snippets that depend on a workspace crate, so each
// chapter is pulled in as the docs of an empty module and `cargo test --doc`
// runs the code blocks. One module per chapter keeps failure names
// traceable to a file.

#[doc = include_str!("../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../book/src/tape.md")]
pub mod tape {}
#[doc = include_str!("../../book/src/lora.md")]
pub mod lora {}
#[doc = include_str!("../../book/src/routing.md")]
pub mod routing {}
#[doc = include_str!("../../book/src/data.md")]
pub mod data {}
#[doc = include_str!("../../book/src/pipeline.md")]
pub mod pipeline {}
#[doc = include_str!("../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../book/src/cli.md")]
pub mod cli {}
