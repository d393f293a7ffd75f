//! Small text utilities shared by indexing, parsing and validation.

use std::collections::HashSet;

/// Lowercases and splits on anything that is not a Unicode alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Function words ignored by overlap scoring and tag extraction.
pub const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "did", "do", "for", "from", "had", "has",
    "have", "he", "her", "his", "i", "in", "is", "it", "its", "of", "on", "or", "s", "she", "that",
    "the", "their", "there", "they", "this", "to", "was", "were", "while", "with",
];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.contains(&token)
}

/// Distinct content tokens (stopwords and single characters removed).
pub fn content_tokens(text: &str) -> HashSet<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| t.chars().count() > 1 && !is_stopword(t))
        .collect()
}

/// Regular English inflections of a base verb: `chop` gives chop, chops,
/// chopped, chopping; `carry` gives carries, carried; `make` gives making.
pub fn verb_forms(verb: &str) -> Vec<String> {
    let v = verb.to_lowercase();
    let mut forms = vec![v.clone()];
    let chars: Vec<char> = v.chars().collect();
    let Some(&last) = chars.last() else {
        return forms;
    };
    let is_vowel = |c: char| "aeiou".contains(c);
    if last == 'e' {
        let stem: String = chars[..chars.len() - 1].iter().collect();
        forms.push(format!("{v}s"));
        forms.push(format!("{v}d"));
        forms.push(format!("{stem}ing"));
    } else if last == 'y' && chars.len() > 1 && !is_vowel(chars[chars.len() - 2]) {
        let stem: String = chars[..chars.len() - 1].iter().collect();
        forms.push(format!("{stem}ies"));
        forms.push(format!("{stem}ied"));
        forms.push(format!("{v}ing"));
    } else {
        if v.ends_with('s') || v.ends_with("sh") || v.ends_with("ch") || v.ends_with('x') {
            forms.push(format!("{v}es"));
        } else {
            forms.push(format!("{v}s"));
        }
        forms.push(format!("{v}ed"));
        forms.push(format!("{v}ing"));
        // consonant-vowel-consonant endings double the final consonant
        if chars.len() >= 3
            && !is_vowel(last)
            && !"wxy".contains(last)
            && is_vowel(chars[chars.len() - 2])
            && !is_vowel(chars[chars.len() - 3])
        {
            forms.push(format!("{v}{last}ed"));
            forms.push(format!("{v}{last}ing"));
        }
    }
    forms
}

/// Verbs from `lexicon` that occur (in any regular inflection) among `tokens`.
pub fn find_verbs<'a, I>(tokens: &[String], lexicon: I) -> Vec<String>
where
    I: IntoIterator<Item = &'a String>,
{
    let present: HashSet<&str> = tokens.iter().map(String::as_str).collect();
    lexicon
        .into_iter()
        .filter(|verb| verb_forms(verb).iter().any(|f| present.contains(f.as_str())))
        .cloned()
        .collect()
}
