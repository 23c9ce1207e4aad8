//! BIO2 / BIOES conversion and chunk extraction.

fn split(tag: &str) -> (&str, &str) {
    match tag.split_once('-') {
        Some((p, t)) => (p, t),
        None => (tag, ""),
    }
}

/// Repairs `I-X` tags that do not continue an `X` chunk by turning them into
/// `B-X`. Returns the number of repairs.
pub fn repair_bio2(tags: &mut [String]) -> usize {
    let mut repairs = 0;
    for i in 0..tags.len() {
        let (p, t) = split(&tags[i]);
        if p != "I" {
            continue;
        }
        let continues = i > 0 && {
            let (pp, pt) = split(&tags[i - 1]);
            (pp == "B" || pp == "I") && pt == t
        };
        if !continues {
            let fixed = format!("B-{t}");
            log::warn!("repairing orphan {} at position {i} to {fixed}", tags[i]);
            tags[i] = fixed;
            repairs += 1;
        }
    }
    repairs
}

/// Converts BIO2 to BIOES: singleton chunks become `S-`, chunk ends `E-`.
/// Invalid input is repaired first; the second value counts repairs.
pub fn bio2_to_bioes<S: AsRef<str>>(tags: &[S]) -> (Vec<String>, usize) {
    let mut bio: Vec<String> = tags.iter().map(|t| t.as_ref().to_string()).collect();
    let repairs = repair_bio2(&mut bio);
    let mut out = Vec::with_capacity(bio.len());
    for i in 0..bio.len() {
        let (p, t) = split(&bio[i]);
        let next_continues = bio.get(i + 1).is_some_and(|n| {
            let (np, nt) = split(n);
            np == "I" && nt == t
        });
        out.push(match (p, next_continues) {
            ("B", true) => format!("B-{t}"),
            ("B", false) => format!("S-{t}"),
            ("I", true) => format!("I-{t}"),
            ("I", false) => format!("E-{t}"),
            _ => bio[i].clone(),
        });
    }
    (out, repairs)
}

/// Inverse of [`bio2_to_bioes`] on valid input.
pub fn bioes_to_bio2<S: AsRef<str>>(tags: &[S]) -> Vec<String> {
    tags.iter()
        .map(|tag| {
            let (p, t) = split(tag.as_ref());
            match p {
                "S" => format!("B-{t}"),
                "E" => format!("I-{t}"),
                _ => tag.as_ref().to_string(),
            }
        })
        .collect()
}

/// `(type, start, end_exclusive)` chunks of a BIOES (or BIO2) sequence.
///
/// Ill-formed predictions are read leniently: a chunk starts at `B-`/`S-`
/// or at an `I-`/`E-` that does not continue the previous chunk's type, and
/// ends after `E-`/`S-` or before anything that does not continue it.
pub fn chunks<S: AsRef<str>>(tags: &[S]) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (p, t) = split(tag.as_ref());
        let continues = matches!(p, "I" | "E") && open.as_ref().is_some_and(|(ot, _)| ot == t);
        if !continues {
            if let Some((ot, s)) = open.take() {
                out.push((ot, s, i));
            }
            if matches!(p, "B" | "S" | "I" | "E") {
                open = Some((t.to_string(), i));
            }
        }
        if matches!(p, "E" | "S") {
            if let Some((ot, s)) = open.take() {
                out.push((ot, s, i + 1));
            }
        }
    }
    if let Some((ot, s)) = open {
        out.push((ot, s, tags.len()));
    }
    out
}
