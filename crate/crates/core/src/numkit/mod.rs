//! Dense numeric core: row-major `f64` tensors, a reverse-mode tape and Adam.

mod adam;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use tape::{Gradients, ParamId, Tape, Var};
pub use tensor::{cosine, Tensor};

pub(crate) use tape::kl_diag_value as kl_value;

use std::cell::Cell;

thread_local! {
    static CHECKED: Cell<bool> = const { Cell::new(true) };
}

/// Whether NaN/Inf validation is active on the current thread.
pub fn checked() -> bool {
    CHECKED.with(Cell::get)
}

/// Toggles NaN/Inf validation for tensors built and ops run on the current thread.
pub fn set_checked(on: bool) {
    CHECKED.with(|c| c.set(on));
}
