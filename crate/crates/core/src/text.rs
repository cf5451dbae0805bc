//! String normalisation shared by extraction and labeling.

use alloc::string::String;
use alloc::vec::Vec;

/// Collapses every run of Unicode whitespace into one ASCII space and trims
/// both ends.
pub fn collapse_whitespace(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Joins text fragments with single spaces and collapses the result.
pub fn join_fragments<'a, I: IntoIterator<Item = &'a str>>(parts: I) -> String {
    let mut out = String::new();
    for part in parts {
        for word in part.split_whitespace() {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(word);
        }
    }
    out
}

/// Canonical form of an annotator-typed concept label: lowercased, with all
/// whitespace and dashes removed. May return an empty string.
pub fn normalize_label(raw: &str) -> String {
    raw.chars()
        .filter(|c| !c.is_whitespace() && *c != '-')
        .flat_map(char::to_lowercase)
        .collect()
}

/// Removes the final dot-suffix of the last path component, if any.
///
/// `"fig1.jpg"` becomes `"fig1"`, `"a/b.c/fig"` is unchanged, and a leading
/// dot (`".hidden"`) is not treated as an extension.
pub fn strip_extension(name: &str) -> &str {
    let start = name.rfind('/').map_or(0, |i| i + 1);
    match name[start..].rfind('.') {
        Some(0) | None => name,
        Some(dot) => &name[..start + dot],
    }
}

/// File extensions treated as figure images.
pub const IMAGE_EXTENSIONS: [&str; 8] = ["jpg", "jpeg", "png", "gif", "tif", "tiff", "bmp", "webp"];

/// Strips a trailing image extension only, so dotted identifiers such as
/// `pone.0012345.g001` survive intact.
pub fn strip_image_extension(name: &str) -> &str {
    match lowercase_extension(name) {
        Some(ext) if IMAGE_EXTENSIONS.contains(&ext.as_str()) => strip_extension(name),
        _ => name,
    }
}

/// Lowercased final dot-suffix of the last path component.
pub fn lowercase_extension(name: &str) -> Option<String> {
    let start = name.rfind('/').map_or(0, |i| i + 1);
    let file = &name[start..];
    match file.rfind('.') {
        Some(0) | None => None,
        Some(dot) => Some(file[dot + 1..].to_lowercase()),
    }
}

/// Splits a space-separated IDREFS attribute value such as `rid="F1 F2"`.
pub fn split_idrefs(value: &str) -> Vec<&str> {
    value.split_whitespace().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_label("Light Microscopy"), "lightmicroscopy");
        assert_eq!(normalize_label("x-ray radiography"), "xrayradiography");
        assert_eq!(normalize_label("  MAP "), "map");
        assert_eq!(normalize_label(" - \t"), "");
    }

    #[test]
    fn extension_handling() {
        assert_eq!(strip_extension("fig1.jpg"), "fig1");
        assert_eq!(strip_extension("fig1"), "fig1");
        assert_eq!(strip_extension("dir.v2/fig1"), "dir.v2/fig1");
        assert_eq!(strip_extension("a.b.JPG"), "a.b");
        assert_eq!(strip_extension(".hidden"), ".hidden");
        assert_eq!(strip_image_extension("pone.0002"), "pone.0002");
        assert_eq!(strip_image_extension("pone.0002.TIF"), "pone.0002");
        assert_eq!(strip_image_extension("fig1"), "fig1");
        assert_eq!(lowercase_extension("PMC1/Fig.JPG").as_deref(), Some("jpg"));
        assert_eq!(lowercase_extension("README"), None);
    }

    #[test]
    fn whitespace() {
        assert_eq!(collapse_whitespace("  a\n\t b  c "), "a b c");
        assert_eq!(join_fragments(["Fig. ", " 1", "", "shows\n"]), "Fig. 1 shows");
        assert_eq!(split_idrefs(" F1  F2 "), ["F1", "F2"]);
    }

    proptest::proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_label(&s);
            proptest::prop_assert_eq!(normalize_label(&once), once);
        }

        #[test]
        fn collapse_is_idempotent(s in "\\PC{0,40}") {
            let once = collapse_whitespace(&s);
            proptest::prop_assert_eq!(collapse_whitespace(&once), once);
        }
    }
}
