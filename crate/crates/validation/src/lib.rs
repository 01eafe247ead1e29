//! Holds the `acceptance` test target: long-running end-to-end checks of the
//! toolkit, kept apart from the unit and integration suites of `mfirl`.
//! Run with `cargo test -p mfirl-validation --test acceptance`.
