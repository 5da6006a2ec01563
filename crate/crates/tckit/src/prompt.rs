//! Prompt templates and their rendered token sequences.
//!
//! A template is a text pattern with one `{label}` slot and one
//! `{text}` slot. Training inputs fill the label slot with the topic
//! label (or replace it with MASK tokens to be predicted); inference
//! inputs always carry the MASK span. The bare form is the raw text
//! sentence used as the contrastive positive.
//!
//! Truncation only ever drops trailing characters of the `{text}`
//! content: template literals and the label survive any budget.

use std::fs;
use std::path::Path;

use crate::corpus::ExpandedExample;
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Vocab, CLS, MASK, PAD};

pub const LABEL_SLOT: &str = "{label}";
pub const TEXT_SLOT: &str = "{text}";

/// Built-in template names accepted by `--prompt`.
pub const DEFAULT_PRETRAIN: &str = "这是一篇关于{label}的内容：{text}";
pub const DEFAULT_PROMPT_1: &str = "这是一篇关于{label}的内容：{text}";
pub const DEFAULT_PROMPT_2: &str = "这是一篇关于“{label}”的内容：“{text}”。";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    pattern: String,
    // Pattern split around the two slots, in order of appearance.
    head: String,
    mid: String,
    tail: String,
    label_first: bool,
}

impl PromptTemplate {
    pub fn new(name: &str, pattern: &str) -> Result<Self> {
        if pattern.is_empty() {
            return Err(Error::Template { reason: "empty pattern".into() });
        }
        let count = |slot: &str| pattern.match_indices(slot).count();
        if count(LABEL_SLOT) != 1 || count(TEXT_SLOT) != 1 {
            return Err(Error::Template {
                reason: format!("pattern must contain {LABEL_SLOT} and {TEXT_SLOT} exactly once"),
            });
        }
        let label_at = pattern.find(LABEL_SLOT).unwrap();
        let text_at = pattern.find(TEXT_SLOT).unwrap();
        let label_first = label_at < text_at;
        let (first_at, first_len, second_at, second_len) = if label_first {
            (label_at, LABEL_SLOT.len(), text_at, TEXT_SLOT.len())
        } else {
            (text_at, TEXT_SLOT.len(), label_at, LABEL_SLOT.len())
        };
        Ok(PromptTemplate {
            name: name.to_string(),
            pattern: pattern.to_string(),
            head: pattern[..first_at].to_string(),
            mid: pattern[first_at + first_len..second_at].to_string(),
            tail: pattern[second_at + second_len..].to_string(),
            label_first,
        })
    }

    /// Resolves a `--prompt` argument: a built-in name or a path to a
    /// UTF-8 file holding the pattern.
    pub fn resolve(arg: &str) -> Result<Self> {
        match arg {
            "pretrain" => PromptTemplate::new("pretrain", DEFAULT_PRETRAIN),
            "1" | "prompt-1" => PromptTemplate::new("prompt-1", DEFAULT_PROMPT_1),
            "2" | "prompt-2" => PromptTemplate::new("prompt-2", DEFAULT_PROMPT_2),
            path => {
                let raw = fs::read_to_string(Path::new(path))
                    .map_err(|e| Error::io(Path::new(path), e))?;
                PromptTemplate::new(path, raw.trim_end_matches('\n'))
            }
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    /// The fixed characters of the pattern, slots excluded.
    pub fn literal_chars(&self) -> impl Iterator<Item = char> + '_ {
        self.head.chars().chain(self.mid.chars()).chain(self.tail.chars())
    }

    fn literal_len(&self) -> usize {
        self.head.chars().count() + self.mid.chars().count() + self.tail.chars().count()
    }
}

/// What a rendered sequence is for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderKind {
    /// Prompt with the label written out.
    Filled,
    /// Prompt with the label replaced by a MASK span.
    Masked,
    /// The raw sentence, no prompt.
    Bare,
}

/// A tokenized model input. `token_ids` always starts with CLS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedInput {
    pub token_ids: Vec<TokenId>,
    pub mask_positions: Vec<usize>,
    pub mask_targets: Vec<TokenId>,
    pub kind: RenderKind,
}

enum LabelForm<'a> {
    Text(&'a str),
    MaskSpan { span: usize, targets: Vec<TokenId> },
}

fn render_prompt(
    t: &PromptTemplate,
    v: &Vocab,
    text: &str,
    label: LabelForm<'_>,
    max_seq_len: usize,
) -> Result<RenderedInput> {
    let label_len = match &label {
        LabelForm::Text(l) => l.chars().count(),
        LabelForm::MaskSpan { span, .. } => *span,
    };
    let fixed = 1 + t.literal_len() + label_len; // CLS + literals + label slot
    if fixed > max_seq_len {
        return Err(Error::Render {
            reason: format!(
                "template {:?} and label span need {fixed} tokens but max_seq_len is {max_seq_len}",
                t.name
            ),
        });
    }
    let text_budget = max_seq_len - fixed;
    let text_used: String = text.chars().take(text_budget).collect();

    let mut ids = vec![CLS];
    let mut mask_positions = Vec::new();
    let mut mask_targets = Vec::new();
    let push_text = |ids: &mut Vec<TokenId>, s: &str| ids.extend(v.encode(s));
    let mut push_label = |ids: &mut Vec<TokenId>| match &label {
        LabelForm::Text(l) => ids.extend(v.encode(l)),
        LabelForm::MaskSpan { span, targets } => {
            for _ in 0..*span {
                mask_positions.push(ids.len());
                ids.push(MASK);
            }
            mask_targets = targets.clone();
        }
    };

    push_text(&mut ids, &t.head);
    if t.label_first {
        push_label(&mut ids);
        push_text(&mut ids, &t.mid);
        push_text(&mut ids, &text_used);
    } else {
        push_text(&mut ids, &text_used);
        push_text(&mut ids, &t.mid);
        push_label(&mut ids);
    }
    push_text(&mut ids, &t.tail);

    let kind = if mask_positions.is_empty() { RenderKind::Filled } else { RenderKind::Masked };
    Ok(RenderedInput { token_ids: ids, mask_positions, mask_targets, kind })
}

/// Prompt with the label text in place. Used for supervised support
/// embeddings and as the non-masked half of training pairs.
pub fn render_filled(
    t: &PromptTemplate,
    v: &Vocab,
    ex: &ExpandedExample,
    max_seq_len: usize,
) -> Result<RenderedInput> {
    render_prompt(t, v, &ex.text, LabelForm::Text(&ex.label), max_seq_len)
}

/// Prompt with the label replaced by `span` MASK tokens; the label's
/// token ids, right-padded with PAD to `span`, become the prediction
/// targets. Every non-slot token matches `render_filled` output.
pub fn render_masked(
    t: &PromptTemplate,
    v: &Vocab,
    ex: &ExpandedExample,
    span: usize,
    max_seq_len: usize,
) -> Result<RenderedInput> {
    let label_ids = v.encode(&ex.label);
    if label_ids.len() > span {
        return Err(Error::Render {
            reason: format!(
                "label {:?} needs {} tokens but the mask span is {span}",
                ex.label,
                label_ids.len()
            ),
        });
    }
    let mut targets = label_ids;
    targets.resize(span, PAD);
    render_prompt(t, v, &ex.text, LabelForm::MaskSpan { span, targets }, max_seq_len)
}

/// Prompt with a MASK span and no targets: the label is unknown.
pub fn render_inference(
    t: &PromptTemplate,
    v: &Vocab,
    text: &str,
    span: usize,
    max_seq_len: usize,
) -> Result<RenderedInput> {
    render_prompt(t, v, text, LabelForm::MaskSpan { span, targets: Vec::new() }, max_seq_len)
}

/// CLS followed by the raw sentence, truncated to the budget.
pub fn render_bare(v: &Vocab, text: &str, max_seq_len: usize) -> RenderedInput {
    let mut ids = vec![CLS];
    ids.extend(v.encode(text).into_iter().take(max_seq_len - 1));
    RenderedInput {
        token_ids: ids,
        mask_positions: Vec::new(),
        mask_targets: Vec::new(),
        kind: RenderKind::Bare,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabelSet;

    fn vocab_for(texts: &[&str]) -> Vocab {
        let exs: Vec<ExpandedExample> = texts
            .iter()
            .map(|t| ExpandedExample { text: t.to_string(), label: "A".into() })
            .collect();
        let t = PromptTemplate::new("t", "X{label}Y{text}").unwrap();
        let labels = LabelSet::new(vec!["A".into(), "餐馆".into()]).unwrap();
        Vocab::build(&exs, &[&t], &labels)
    }

    fn ex(text: &str, label: &str) -> ExpandedExample {
        ExpandedExample { text: text.into(), label: label.into() }
    }

    #[test]
    fn pattern_validation() {
        assert!(PromptTemplate::new("t", "{label}{text}").is_ok());
        assert!(PromptTemplate::new("t", "{text}后置{label}").is_ok());
        assert!(PromptTemplate::new("t", "{label}").is_err());
        assert!(PromptTemplate::new("t", "{label}{text}{label}").is_err());
        assert!(PromptTemplate::new("t", "").is_err());
    }

    #[test]
    fn filled_substitutes_both_slots() {
        let v = vocab_for(&["b"]);
        let t = PromptTemplate::new("t", "X{label}Y{text}").unwrap();
        let r = render_filled(&t, &v, &ex("b", "A"), 16).unwrap();
        let mut expect = vec![CLS];
        expect.extend(v.encode("XAYb"));
        assert_eq!(r.token_ids, expect);
        assert_eq!(r.kind, RenderKind::Filled);
        assert!(r.mask_positions.is_empty());
    }

    #[test]
    fn truncation_keeps_template_and_label() {
        let v = vocab_for(&["bbbbbbbb"]);
        let t = PromptTemplate::new("t", "X{label}Y{text}").unwrap();
        // CLS + X + A + Y = 4 fixed tokens; budget 6 leaves 2 text chars.
        let r = render_filled(&t, &v, &ex("bbbbbbbb", "A"), 6).unwrap();
        assert_eq!(r.token_ids.len(), 6);
        assert_eq!(v.decode(&r.token_ids[1..]), "XAYbb");
        // Fixed part alone over budget is an error.
        assert!(render_filled(&t, &v, &ex("b", "A"), 3).is_err());
    }

    #[test]
    fn filled_with_empty_text() {
        let v = vocab_for(&["b"]);
        let t = PromptTemplate::new("t", "X{label}Y{text}").unwrap();
        let r = render_filled(&t, &v, &ex("", "A"), 16).unwrap();
        assert_eq!(v.decode(&r.token_ids[1..]), "XAY");
    }

    #[test]
    fn masked_two_char_label() {
        let v = vocab_for(&["这家餐厅的菜很好吃"]);
        let t = PromptTemplate::new("t", "X{label}Y{text}").unwrap();
        let r = render_masked(&t, &v, &ex("这家餐厅的菜很好吃", "餐馆"), 2, 32).unwrap();
        assert_eq!(r.mask_positions, vec![2, 3]);
        assert_eq!(r.token_ids[2], MASK);
        assert_eq!(r.token_ids[3], MASK);
        assert_eq!(r.mask_targets, vec![v.id_of_char('餐'), v.id_of_char('馆')]);
    }

    #[test]
    fn masked_short_label_pads_targets() {
        let v = vocab_for(&["b"]);
        let t = PromptTemplate::new("t", "X{label}Y{text}").unwrap();
        let r = render_masked(&t, &v, &ex("b", "A"), 2, 16).unwrap();
        assert_eq!(r.mask_positions.len(), 2);
        assert_eq!(r.mask_targets, vec![v.id_of_char('A'), PAD]);
        // Exact-fit span carries no PAD target.
        let r = render_masked(&t, &v, &ex("b", "A"), 1, 16).unwrap();
        assert_eq!(r.mask_targets, vec![v.id_of_char('A')]);
        // Label longer than the span is an error.
        assert!(render_masked(&t, &v, &ex("b", "餐馆"), 1, 16).is_err());
    }

    #[test]
    fn inference_has_no_targets() {
        let v = vocab_for(&["bc"]);
        let t = PromptTemplate::new("t", "X{label}Y{text}").unwrap();
        let r = render_inference(&t, &v, "bc", 3, 16).unwrap();
        assert_eq!(r.mask_positions.len(), 3);
        assert!(r.mask_targets.is_empty());
        assert_eq!(r.kind, RenderKind::Masked);
        assert_eq!(r, render_inference(&t, &v, "bc", 3, 16).unwrap());
    }

    #[test]
    fn bare_is_cls_plus_text() {
        let v = vocab_for(&["ab"]);
        let r = render_bare(&v, "ab", 16);
        assert_eq!(r.token_ids, vec![CLS, v.id_of_char('a'), v.id_of_char('b')]);
        assert_eq!(r.kind, RenderKind::Bare);
        assert_eq!(render_bare(&v, "", 16).token_ids, vec![CLS]);
        assert_eq!(render_bare(&v, "ababab", 4).token_ids.len(), 4);
    }

    #[test]
    fn masked_and_filled_agree_off_slot() {
        let v = vocab_for(&["这家餐厅的菜很好吃"]);
        for pattern in ["X{label}Y{text}Z", "头{text}中{label}尾"] {
            let t = PromptTemplate::new("t", pattern).unwrap();
            let e = ex("这家餐厅的菜很好吃", "餐馆");
            let span = 3;
            let filled = render_filled(&t, &v, &e, 32).unwrap();
            let masked = render_masked(&t, &v, &e, span, 32).unwrap();
            // Remove the slot region from both and compare the rest.
            let m_start = masked.mask_positions[0];
            let m_end = *masked.mask_positions.last().unwrap() + 1;
            let label_len = e.label.chars().count();
            let f_start = m_start;
            let f_end = m_start + label_len;
            let mut filled_rest = filled.token_ids.clone();
            filled_rest.drain(f_start..f_end);
            let mut masked_rest = masked.token_ids.clone();
            masked_rest.drain(m_start..m_end);
            // The text slot must be bit-identical in both renders; the
            // differing budgets only matter when truncation bites.
            assert_eq!(filled_rest, masked_rest);
            assert!(masked.mask_positions.iter().all(|&p| masked.token_ids[p] == MASK));
        }
    }
}
