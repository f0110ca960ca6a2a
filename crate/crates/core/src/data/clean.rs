use std::sync::OnceLock;

use regex::Regex;

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)(?:https?://|ftp://|www\.)\S*").expect("valid regex"))
}

fn digits_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[0-9]{7,}").expect("valid regex"))
}

fn spaces_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r" {2,}").expect("valid regex"))
}

fn canonical_punct(c: char) -> char {
    match c {
        '，' | '、' => ',',
        '。' | '．' => '.',
        '！' => '!',
        '？' => '?',
        '：' => ':',
        '；' => ';',
        '（' | '【' | '［' => '(',
        '）' | '】' | '］' => ')',
        '“' | '”' | '「' | '」' | '『' | '』' | '＂' => '"',
        '‘' | '’' | '＇' => '\'',
        '—' | '–' | '－' => '-',
        '\t' | '\u{3000}' | '\u{a0}' => ' ',
        other => other,
    }
}

/// Strips URLs and digit runs of seven or more (phone numbers, ids), maps
/// punctuation onto a canonical ASCII set and collapses repeated spaces.
pub fn clean_text(raw: &str) -> String {
    let no_urls = url_re().replace_all(raw, "");
    let no_numbers = digits_re().replace_all(&no_urls, "");
    let normalized: String = no_numbers.chars().map(canonical_punct).collect();
    spaces_re().replace_all(&normalized, " ").into_owned()
}
