//! Bundled public-domain text used as the desk-scale training corpus.

/// Lewis Carroll, *Alice's Adventures in Wonderland* (Millennium Fulcrum 2.9).
pub const ALICE: &str = include_str!("../../core/fixtures/alice29.txt");

/// John Milton, *Paradise Lost* (Project Gutenberg, 1992).
pub const PARADISE_LOST: &str = include_str!("../../core/fixtures/plrabn12.txt");

/// Both books, Alice first.
pub fn desk_book() -> String {
    format!("{ALICE}\n\n{PARADISE_LOST}")
}
