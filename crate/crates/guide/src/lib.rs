//! Placeholder; filled once the book chapters exist.
