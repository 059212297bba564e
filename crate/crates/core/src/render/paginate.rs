use super::{rasterize, RenderConfig, RenderError, TextImage};
use crate::corpus::Tokenizer;

/// Images needed for `token_count` tokens spelling `char_count` characters:
/// the calibrated per-image token capacity, raised if the characters would
/// not fit on that many strips.
pub fn image_count(token_count: usize, char_count: usize, cfg: &RenderConfig) -> usize {
    if token_count == 0 && char_count == 0 {
        return 0;
    }
    token_count
        .div_ceil(cfg.tokens_per_image)
        .max(char_count.div_ceil(cfg.strip_capacity()))
}

/// Decodes `tokens`, splits the text into `M` contiguous character chunks
/// of near-equal length and rasterizes each. Chunks without ink are dropped.
pub fn paginate(tokens: &[usize], tokenizer: &Tokenizer, cfg: &RenderConfig) -> Result<Vec<TextImage>, RenderError> {
    cfg.validate()?;
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    let text = tokenizer.decode(tokens);
    // character offset at which each token ends, for source spans
    let mut ends = Vec::with_capacity(tokens.len());
    let mut acc = 0usize;
    for &t in tokens {
        acc += tokenizer.decode_bytes(&[t]).iter().filter(|&&b| (b & 0xC0) != 0x80).count();
        ends.push(acc);
    }
    paginate_chunks(&text, tokens.len(), &ends, cfg)
}

/// Paginates raw text as if it were `token_count` tokens long.
pub fn paginate_text(text: &str, token_count: usize, cfg: &RenderConfig) -> Result<Vec<TextImage>, RenderError> {
    cfg.validate()?;
    let n = text.chars().count();
    // spread token boundaries uniformly over the characters
    let ends: Vec<usize> = (1..=token_count).map(|i| i * n / token_count.max(1)).collect();
    paginate_chunks(text, token_count, &ends, cfg)
}

fn paginate_chunks(text: &str, token_count: usize, ends: &[usize], cfg: &RenderConfig) -> Result<Vec<TextImage>, RenderError> {
    let chars: Vec<char> = text.chars().collect();
    let m = image_count(token_count, chars.len(), cfg);
    if m == 0 {
        return Ok(Vec::new());
    }
    let (q, r) = (chars.len() / m, chars.len() % m);
    let mut images = Vec::with_capacity(m);
    let mut start = 0;
    for i in 0..m {
        let len = q + usize::from(i < r);
        let chunk: String = chars[start..start + len].iter().collect();
        let mut img = rasterize(&chunk, cfg)?;
        if img.has_ink(cfg.background_level) {
            let first = ends.partition_point(|&e| e <= start);
            let last = ends.partition_point(|&e| e < start + len) + 1;
            img.source_span = (first.min(token_count), last.min(token_count));
            images.push(img);
        }
        start += len;
    }
    Ok(images)
}
