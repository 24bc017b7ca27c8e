//! Narrative guide chapters, embedded so their code snippets compile and run
//! as doc-tests. The rendered book lives in `book/` at the repository root;
//! one module per chapter keeps a failing snippet traceable to its page.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/architecture.md")]
pub mod architecture {}

#[doc = include_str!("../../../book/src/preprocessing.md")]
pub mod preprocessing {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/quantization.md")]
pub mod quantization {}

#[doc = include_str!("../../../book/src/pruning.md")]
pub mod pruning {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/model-format.md")]
pub mod model_format {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
