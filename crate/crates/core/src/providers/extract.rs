//! Visible-text extraction from fetched HTML pages.

use scraper::{ElementRef, Html, Node};

/// Elements whose text content is harvested.
const ALLOWLIST: &[&str] = &[
    "article", "main", "p", "h1", "h2", "h3", "h4", "h5", "h6", "li",
];

/// Never rendered as text.
const SKIPPED: &[&str] = &["script", "style", "noscript", "template", "svg", "head"];

/// Elements that end a line of text.
const BLOCKS: &[&str] = &[
    "article",
    "main",
    "section",
    "div",
    "p",
    "h1",
    "h2",
    "h3",
    "h4",
    "h5",
    "h6",
    "li",
    "ul",
    "ol",
    "br",
    "tr",
    "table",
    "blockquote",
    "pre",
    "header",
    "footer",
    "aside",
    "nav",
    "figure",
    "figcaption",
    "dd",
    "dt",
];

/// Returns the whitespace-normalized text of allowlisted elements, one
/// block per line. Text outside the allowlist is ignored.
pub fn extract_visible_text(html: &str) -> String {
    let doc = Html::parse_document(html);
    let mut buf = String::new();
    walk(doc.root_element(), false, &mut buf);

    let lines: Vec<String> = buf
        .lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|l| !l.is_empty())
        .collect();
    lines.join("\n")
}

fn walk(el: ElementRef<'_>, inside: bool, out: &mut String) {
    let name = el.value().name();
    if SKIPPED.contains(&name) {
        return;
    }
    let inside = inside || ALLOWLIST.contains(&name);
    let block = BLOCKS.contains(&name);
    if block && inside {
        out.push('\n');
    }
    for child in el.children() {
        match child.value() {
            // Source newlines are collapsible whitespace, not line breaks.
            Node::Text(t) if inside => {
                out.extend(
                    t.chars()
                        .map(|c| if c == '\n' || c == '\r' { ' ' } else { c }),
                )
            }
            Node::Element(_) => {
                if let Some(child_el) = ElementRef::wrap(child) {
                    walk(child_el, inside, out);
                }
            }
            _ => {}
        }
    }
    if block && inside {
        out.push('\n');
    }
}

/// Whether a response looks like HTML, from its content type or a body sniff.
pub fn looks_like_html(content_type: Option<&str>, body: &str) -> bool {
    match content_type {
        Some(ct) => {
            let ct = ct.to_ascii_lowercase();
            ct.contains("text/html") || ct.contains("application/xhtml")
        }
        None => {
            let head: String = body
                .trim_start()
                .chars()
                .take(256)
                .collect::<String>()
                .to_ascii_lowercase();
            head.starts_with("<!doctype html")
                || head.starts_with("<html")
                || head.contains("<body")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn article_paragraph_without_script() {
        let html = "<article><p>ক খ</p><script>x</script></article>";
        assert_eq!(extract_visible_text(html), "ক খ");
    }

    #[test]
    fn div_only_text_is_ignored() {
        assert_eq!(
            extract_visible_text("<html><body><div>hidden text</div></body></html>"),
            ""
        );
    }

    #[test]
    fn paragraphs_become_lines() {
        let html = "<main><h1>Title</h1><p>one\n   two</p><p>three</p><style>p{}</style><ul><li>x</li><li>y</li></ul></main><footer><p>f</p></footer>";
        assert_eq!(extract_visible_text(html), "Title\none two\nthree\nx\ny\nf");
    }

    #[test]
    fn nested_allowlisted_elements_not_duplicated() {
        let html = "<article><p>once</p></article>";
        assert_eq!(extract_visible_text(html), "once");
    }

    #[test]
    fn html_sniffing() {
        assert!(looks_like_html(Some("text/html; charset=utf-8"), ""));
        assert!(!looks_like_html(Some("application/pdf"), "<html>"));
        assert!(looks_like_html(None, "  <!DOCTYPE html><html>"));
        assert!(!looks_like_html(None, "%PDF-1.7"));
    }
}
