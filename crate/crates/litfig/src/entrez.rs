//! Batched MeSH and cited-by lookups against an E-utilities style service.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;
use std::time::Duration;

use litfig_core::batch::{batch_ids, DEFAULT_BATCH_SIZE};
use serde::{Deserialize, Serialize};

use crate::throttle::{with_retries, RateGate, RetryPolicy, Transient};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrichmentRecord {
    pub pmid: u64,
    pub mesh_terms: Vec<String>,
    pub citing_pmids: Vec<u64>,
    pub citing_count: u64,
}

impl EnrichmentRecord {
    pub fn empty(pmid: u64) -> Self {
        Self {
            pmid,
            mesh_terms: Vec::new(),
            citing_pmids: Vec::new(),
            citing_count: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ServiceError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("{0}")]
    Fatal(String),
}

impl Transient for ServiceError {
    fn is_transient(&self) -> bool {
        matches!(self, ServiceError::Transient(_))
    }
}

/// The two calls enrichment needs. Both return the raw XML body.
pub trait MetadataService: Send + Sync {
    /// PubMed records (`PubmedArticleSet`) for `pmids`.
    fn efetch(&self, pmids: &[u64]) -> Result<String, ServiceError>;
    /// Cited-by links (`eLinkResult`), one link set per PMID.
    fn citedin(&self, pmids: &[u64]) -> Result<String, ServiceError>;
}

#[derive(Debug, thiserror::Error)]
pub enum EnrichError {
    #[error("batch {batch:?}: gave up after {attempts} attempts: {last}")]
    Exhausted {
        batch: Vec<u64>,
        attempts: u32,
        last: ServiceError,
    },
    #[error("batch {batch:?}: malformed response: {message}")]
    Parse { batch: Vec<u64>, message: String },
    #[error("batch of {len} exceeds the limit of {limit}")]
    BatchTooLarge { len: usize, limit: usize },
}

/// One service call as issued by [`fetch_enrichment`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestLog {
    pub op: String,
    pub pmids: usize,
    pub attempts: u32,
    pub response_bytes: usize,
}

fn push_unique<T: PartialEq>(list: &mut Vec<T>, item: T) {
    if !list.contains(&item) {
        list.push(item);
    }
}

fn parse_doc(xml: &str) -> Result<roxmltree::Document<'_>, String> {
    let opts = roxmltree::ParsingOptions {
        allow_dtd: true,
        ..Default::default()
    };
    roxmltree::Document::parse_with_options(xml, opts).map_err(|e| e.to_string())
}

fn child<'a, 'i>(node: roxmltree::Node<'a, 'i>, name: &str) -> Option<roxmltree::Node<'a, 'i>> {
    node.children().find(|n| n.has_tag_name(name))
}

fn text_u64(node: roxmltree::Node<'_, '_>) -> Result<u64, String> {
    let t = node.text().unwrap_or("").trim();
    t.parse().map_err(|_| format!("bad id {t:?}"))
}

/// MeSH descriptor names per PMID from an efetch response, deduplicated in
/// response order.
pub fn parse_mesh(xml: &str) -> Result<BTreeMap<u64, Vec<String>>, String> {
    let doc = parse_doc(xml)?;
    if !doc.root_element().has_tag_name("PubmedArticleSet") {
        return Err(format!("unexpected root <{}>", doc.root_element().tag_name().name()));
    }
    let mut out: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    for citation in doc.descendants().filter(|n| n.has_tag_name("MedlineCitation")) {
        let pmid = child(citation, "PMID").ok_or("MedlineCitation without PMID")?;
        let terms = out.entry(text_u64(pmid)?).or_default();
        for name in citation
            .descendants()
            .filter(|n| n.has_tag_name("DescriptorName"))
            .filter(|n| n.ancestors().any(|a| a.has_tag_name("MeshHeading")))
        {
            let t = name.text().unwrap_or("").trim();
            if !t.is_empty() {
                push_unique(terms, t.to_string());
            }
        }
    }
    Ok(out)
}

/// Citing PMIDs per source PMID from an elink `pubmed_pubmed_citedin`
/// response.
pub fn parse_citedin(xml: &str) -> Result<BTreeMap<u64, Vec<u64>>, String> {
    let doc = parse_doc(xml)?;
    if !doc.root_element().has_tag_name("eLinkResult") {
        return Err(format!("unexpected root <{}>", doc.root_element().tag_name().name()));
    }
    let mut out: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for set in doc.root_element().children().filter(|n| n.has_tag_name("LinkSet")) {
        let ids = child(set, "IdList").ok_or("LinkSet without IdList")?;
        let sources: Vec<u64> = ids
            .children()
            .filter(|n| n.has_tag_name("Id"))
            .map(text_u64)
            .collect::<Result<_, _>>()?;
        let mut citing = Vec::new();
        for db in set.children().filter(|n| n.has_tag_name("LinkSetDb")) {
            let name = child(db, "LinkName").and_then(|n| n.text()).unwrap_or("");
            if name != "pubmed_pubmed_citedin" {
                continue;
            }
            for link in db.children().filter(|n| n.has_tag_name("Link")) {
                if let Some(id) = child(link, "Id") {
                    push_unique(&mut citing, text_u64(id)?);
                }
            }
        }
        for s in sources {
            let entry = out.entry(s).or_default();
            for c in &citing {
                push_unique(entry, *c);
            }
        }
    }
    Ok(out)
}

/// Looks up one batch. Every requested PMID gets a record; PMIDs the service
/// does not know get empty lists.
pub fn fetch_enrichment(
    batch: &[u64],
    service: &dyn MetadataService,
    gate: &RateGate,
    retry: &RetryPolicy,
    batch_limit: usize,
) -> Result<(Vec<EnrichmentRecord>, Vec<RequestLog>), EnrichError> {
    if batch.len() > batch_limit {
        return Err(EnrichError::BatchTooLarge {
            len: batch.len(),
            limit: batch_limit,
        });
    }
    if batch.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let exhausted = |e: crate::throttle::Exhausted<ServiceError>| EnrichError::Exhausted {
        batch: batch.to_vec(),
        attempts: e.attempts,
        last: e.last,
    };
    let parse_err = |message: String| EnrichError::Parse {
        batch: batch.to_vec(),
        message,
    };

    let (mesh_xml, a1) = with_retries(gate, retry, || service.efetch(batch)).map_err(exhausted)?;
    let (link_xml, a2) = with_retries(gate, retry, || service.citedin(batch)).map_err(exhausted)?;
    let log = vec![
        RequestLog {
            op: "efetch".into(),
            pmids: batch.len(),
            attempts: a1,
            response_bytes: mesh_xml.len(),
        },
        RequestLog {
            op: "elink".into(),
            pmids: batch.len(),
            attempts: a2,
            response_bytes: link_xml.len(),
        },
    ];
    let mut mesh = parse_mesh(&mesh_xml).map_err(parse_err)?;
    let mut cited = parse_citedin(&link_xml).map_err(parse_err)?;

    let records = batch
        .iter()
        .map(|&pmid| {
            let citing_pmids = cited.remove(&pmid).unwrap_or_default();
            EnrichmentRecord {
                pmid,
                mesh_terms: mesh.remove(&pmid).unwrap_or_default(),
                citing_count: citing_pmids.len() as u64,
                citing_pmids,
            }
        })
        .collect();
    Ok((records, log))
}

/// Looks up every PMID, `batch_size` at a time, with batches running
/// concurrently behind one shared gate. Duplicate PMIDs are fetched once.
pub fn enrich_pmids(
    pmids: &[u64],
    batch_size: usize,
    service: &dyn MetadataService,
    gate: &RateGate,
    retry: &RetryPolicy,
) -> Result<(BTreeMap<u64, EnrichmentRecord>, Vec<RequestLog>), EnrichError> {
    use rayon::prelude::*;

    let mut unique = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for &p in pmids {
        if seen.insert(p) {
            unique.push(p);
        }
    }
    let batches = batch_ids(&unique, batch_size.max(1));
    let results: Vec<_> = batches
        .par_iter()
        .map(|b| fetch_enrichment(b, service, gate, retry, batch_size.max(1)))
        .collect();
    let mut records = BTreeMap::new();
    let mut log = Vec::new();
    for r in results {
        let (recs, l) = r?;
        log.extend(l);
        records.extend(recs.into_iter().map(|r| (r.pmid, r)));
    }
    Ok((records, log))
}

/// HTTP client for the NCBI E-utilities endpoints (or anything serving the
/// same paths).
pub struct HttpService {
    base: String,
    agent: ureq::Agent,
}

impl HttpService {
    pub const NCBI: &'static str = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils/";

    pub fn new(base_url: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        let mut base = base_url.to_string();
        if !base.ends_with('/') {
            base.push('/');
        }
        Self { base, agent }
    }

    fn get(&self, url: &str) -> Result<String, ServiceError> {
        match self.agent.get(url).call() {
            Ok(resp) => resp
                .into_body()
                .read_to_string()
                .map_err(|e| ServiceError::Transient(e.to_string())),
            Err(ureq::Error::StatusCode(code)) if code == 429 || code >= 500 => {
                Err(ServiceError::Transient(format!("HTTP {code}")))
            }
            Err(ureq::Error::StatusCode(code)) => Err(ServiceError::Fatal(format!("HTTP {code}"))),
            Err(e) => Err(ServiceError::Transient(e.to_string())),
        }
    }
}

impl MetadataService for HttpService {
    fn efetch(&self, pmids: &[u64]) -> Result<String, ServiceError> {
        let ids: Vec<String> = pmids.iter().map(u64::to_string).collect();
        self.get(&format!(
            "{}efetch.fcgi?db=pubmed&retmode=xml&id={}",
            self.base,
            ids.join(",")
        ))
    }

    fn citedin(&self, pmids: &[u64]) -> Result<String, ServiceError> {
        let ids: String = pmids.iter().map(|p| format!("&id={p}")).collect();
        self.get(&format!(
            "{}elink.fcgi?dbfrom=pubmed&db=pubmed&linkname=pubmed_pubmed_citedin{ids}",
            self.base
        ))
    }
}

/// Canned records served by [`MockService`]; also the on-disk fixture format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CannedRecord {
    pub pmid: u64,
    #[serde(default)]
    pub mesh_terms: Vec<String>,
    #[serde(default)]
    pub citing_pmids: Vec<u64>,
}

#[derive(Debug, Default)]
struct MockState {
    failures: u32,
    malformed: bool,
    calls: Vec<(String, Vec<u64>)>,
}

/// In-process service answering from canned records with real response XML.
#[derive(Debug, Default)]
pub struct MockService {
    records: HashMap<u64, CannedRecord>,
    state: Mutex<MockState>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl MockService {
    pub fn new(records: impl IntoIterator<Item = CannedRecord>) -> Self {
        Self {
            records: records.into_iter().map(|r| (r.pmid, r)).collect(),
            state: Mutex::default(),
        }
    }

    /// Fails the next `n` calls transiently.
    pub fn fail_next(&self, n: u32) {
        self.state.lock().unwrap().failures = n;
    }

    pub fn return_malformed(&self, yes: bool) {
        self.state.lock().unwrap().malformed = yes;
    }

    /// Every call received, as `(operation, pmids)`.
    pub fn calls(&self) -> Vec<(String, Vec<u64>)> {
        self.state.lock().unwrap().calls.clone()
    }

    fn enter(&self, op: &str, pmids: &[u64]) -> Result<bool, ServiceError> {
        let mut s = self.state.lock().unwrap();
        s.calls.push((op.to_string(), pmids.to_vec()));
        if s.failures > 0 {
            s.failures -= 1;
            return Err(ServiceError::Transient("service unavailable".into()));
        }
        Ok(s.malformed)
    }

    pub fn efetch_xml(&self, pmids: &[u64]) -> String {
        let mut xml = String::from("<?xml version=\"1.0\"?>\n<PubmedArticleSet>\n");
        for p in pmids {
            let Some(r) = self.records.get(p) else { continue };
            xml.push_str(&format!(
                "<PubmedArticle><MedlineCitation Status=\"MEDLINE\"><PMID Version=\"1\">{p}</PMID><MeshHeadingList>"
            ));
            for t in &r.mesh_terms {
                xml.push_str(&format!(
                    "<MeshHeading><DescriptorName MajorTopicYN=\"N\">{}</DescriptorName></MeshHeading>",
                    escape(t)
                ));
            }
            xml.push_str("</MeshHeadingList></MedlineCitation></PubmedArticle>\n");
        }
        xml.push_str("</PubmedArticleSet>\n");
        xml
    }

    pub fn elink_xml(&self, pmids: &[u64]) -> String {
        let mut xml = String::from("<?xml version=\"1.0\"?>\n<eLinkResult>\n");
        for p in pmids {
            xml.push_str(&format!("<LinkSet><DbFrom>pubmed</DbFrom><IdList><Id>{p}</Id></IdList>"));
            if let Some(r) = self.records.get(p).filter(|r| !r.citing_pmids.is_empty()) {
                xml.push_str("<LinkSetDb><DbTo>pubmed</DbTo><LinkName>pubmed_pubmed_citedin</LinkName>");
                for c in &r.citing_pmids {
                    xml.push_str(&format!("<Link><Id>{c}</Id></Link>"));
                }
                xml.push_str("</LinkSetDb>");
            }
            xml.push_str("</LinkSet>\n");
        }
        xml.push_str("</eLinkResult>\n");
        xml
    }
}

impl MetadataService for MockService {
    fn efetch(&self, pmids: &[u64]) -> Result<String, ServiceError> {
        if self.enter("efetch", pmids)? {
            return Ok("<PubmedArticleSet><PubmedArticle>".into());
        }
        Ok(self.efetch_xml(pmids))
    }

    fn citedin(&self, pmids: &[u64]) -> Result<String, ServiceError> {
        if self.enter("elink", pmids)? {
            return Ok("<eLinkResult><LinkSet>".into());
        }
        Ok(self.elink_xml(pmids))
    }
}

pub const BATCH_SIZE: usize = DEFAULT_BATCH_SIZE;

#[cfg(test)]
mod tests {
    use super::*;

    fn gate() -> RateGate {
        RateGate::new(10_000.0, Duration::ZERO)
    }

    fn quick() -> RetryPolicy {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(2),
        }
    }

    fn mock() -> MockService {
        MockService::new([
            CannedRecord {
                pmid: 1,
                mesh_terms: vec!["Humans".into(), "Mice".into(), "Humans".into()],
                citing_pmids: vec![10, 11, 10],
            },
            CannedRecord {
                pmid: 2,
                mesh_terms: vec!["Humans".into()],
                citing_pmids: vec![],
            },
        ])
    }

    #[test]
    fn known_and_unknown_pmids() {
        let m = mock();
        let (recs, log) = fetch_enrichment(&[1, 2, 3], &m, &gate(), &quick(), 200).unwrap();
        assert_eq!(recs[0].mesh_terms, vec!["Humans", "Mice"]);
        assert_eq!(recs[0].citing_pmids, vec![10, 11]);
        assert_eq!(recs[0].citing_count, 2);
        assert_eq!(recs[1].citing_count, 0);
        assert_eq!(recs[2], EnrichmentRecord::empty(3));
        assert_eq!(log.len(), 2);
    }

    #[test]
    fn retries_then_parse_error_names_batch() {
        let m = mock();
        m.fail_next(2);
        let (recs, log) = fetch_enrichment(&[2], &m, &gate(), &quick(), 200).unwrap();
        assert_eq!(recs[0].mesh_terms, vec!["Humans"]);
        assert_eq!(log[0].attempts, 3);

        m.return_malformed(true);
        match fetch_enrichment(&[1, 2], &m, &gate(), &quick(), 200) {
            Err(EnrichError::Parse { batch, .. }) => assert_eq!(batch, vec![1, 2]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn batches_respect_the_limit() {
        let m = mock();
        let pmids: Vec<u64> = (1..=450).collect();
        let (recs, _) = enrich_pmids(&pmids, 200, &m, &gate(), &quick()).unwrap();
        assert_eq!(recs.len(), 450);
        assert!(m.calls().iter().all(|(_, b)| b.len() <= 200));
        assert_eq!(m.calls().len(), 6);
        assert!(matches!(
            fetch_enrichment(&pmids, &m, &gate(), &quick(), 200),
            Err(EnrichError::BatchTooLarge { len: 450, limit: 200 })
        ));
    }

    #[test]
    fn parses_upstream_shapes() {
        let efetch = r#"<?xml version="1.0" ?>
<!DOCTYPE PubmedArticleSet PUBLIC "-//NLM//DTD PubMedArticle, 1st January 2024//EN" "https://dtd.nlm.nih.gov/ncbi/pubmed/out/pubmed_240101.dtd">
<PubmedArticleSet><PubmedArticle><MedlineCitation><PMID Version="1">7</PMID>
<Article><ArticleTitle>x</ArticleTitle></Article>
<MeshHeadingList><MeshHeading><DescriptorName UI="D006801">Humans</DescriptorName><QualifierName>x</QualifierName></MeshHeading></MeshHeadingList>
<CommentsCorrectionsList><CommentsCorrections><PMID>99</PMID></CommentsCorrections></CommentsCorrectionsList>
</MedlineCitation></PubmedArticle></PubmedArticleSet>"#;
        let mesh = parse_mesh(efetch).unwrap();
        assert_eq!(mesh.len(), 1);
        assert_eq!(mesh[&7], vec!["Humans"]);
        assert!(parse_mesh("<eLinkResult/>").is_err());
        assert!(parse_citedin("<eLinkResult><LinkSet><IdList><Id>x</Id></IdList></LinkSet></eLinkResult>").is_err());
    }
}
