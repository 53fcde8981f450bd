//! Book chapters compiled as doctests so the guide's snippets stay in sync
//! with the library. Built only under `cfg(doctest)`.
