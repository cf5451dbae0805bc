//! License grouping for open-access articles.
//!
//! Articles fall into three groups: commercial use allowed (CC0, CC BY,
//! CC BY-SA, CC BY-ND), non-commercial use only (CC BY-NC, CC BY-NC-SA,
//! CC BY-NC-ND), and everything else.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LicenseGroup {
    Commercial,
    Noncommercial,
    Other,
}

impl LicenseGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            LicenseGroup::Commercial => "commercial",
            LicenseGroup::Noncommercial => "noncommercial",
            LicenseGroup::Other => "other",
        }
    }
}

impl fmt::Display for LicenseGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Splits a raw license string into lowercase alphanumeric tokens.
///
/// "CC BY-NC-ND 4.0" becomes `["cc", "by", "nc", "nd", "4", "0"]`, and the
/// URL form "creativecommons.org/licenses/by-nc/4.0/" becomes
/// `["creativecommons", "org", "licenses", "by", "nc", "4", "0"]`.
fn license_tokens(raw: &str) -> Vec<String> {
    raw.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Maps a raw license string onto its license group.
///
/// Total over all inputs. Recognises the short forms used by the mirror's
/// file list ("CC BY-NC-SA", "CC0") as well as Creative Commons URLs.
pub fn classify_license(raw: &str) -> LicenseGroup {
    let tokens = license_tokens(raw);
    let has = |t: &str| tokens.iter().any(|x| x == t);

    // Public domain dedication: "CC0", "CC0 1.0", ".../publicdomain/zero/1.0/".
    if has("cc0") || (has("publicdomain") && has("zero")) {
        return LicenseGroup::Commercial;
    }

    // Everything else must carry a Creative Commons marker and the BY element.
    let creative_commons = has("cc") || has("creativecommons");
    if !creative_commons || !has("by") {
        return LicenseGroup::Other;
    }

    // The attribution element must be followed only by known modifiers.
    let by_pos = tokens.iter().position(|t| t == "by").unwrap_or(0);
    let mut nc = false;
    for tok in &tokens[by_pos + 1..] {
        match tok.as_str() {
            "nc" => nc = true,
            "sa" | "nd" => {}
            t if t.chars().all(|c| c.is_ascii_digit()) => {}
            "license" | "licence" | "international" | "unported" | "generic" | "deed" | "legalcode" => {}
            _ => return LicenseGroup::Other,
        }
    }
    if nc {
        LicenseGroup::Noncommercial
    } else {
        LicenseGroup::Commercial
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commercial_forms() {
        for raw in ["CC0", "CC BY", "CC BY-SA", "CC BY-ND", "cc by 4.0", "CC0 1.0"] {
            assert_eq!(classify_license(raw), LicenseGroup::Commercial, "{raw}");
        }
    }

    #[test]
    fn noncommercial_forms() {
        for raw in ["CC BY-NC", "CC BY-NC-SA", "CC BY-NC-ND", "cc by-nc-nd 3.0"] {
            assert_eq!(classify_license(raw), LicenseGroup::Noncommercial, "{raw}");
        }
    }

    #[test]
    fn other_forms() {
        for raw in ["", "   ", "custom hospital license", "NO-CC CODE", "All rights reserved", "CC"] {
            assert_eq!(classify_license(raw), LicenseGroup::Other, "{raw}");
        }
    }

    #[test]
    fn urls() {
        assert_eq!(
            classify_license("https://creativecommons.org/licenses/by-nc/4.0/"),
            LicenseGroup::Noncommercial
        );
        assert_eq!(
            classify_license("http://creativecommons.org/licenses/by/4.0/"),
            LicenseGroup::Commercial
        );
        assert_eq!(
            classify_license("https://creativecommons.org/publicdomain/zero/1.0/"),
            LicenseGroup::Commercial
        );
    }

    #[test]
    fn case_and_whitespace_stable() {
        assert_eq!(classify_license("  cc By-nC "), classify_license("CC BY-NC"));
    }
}
