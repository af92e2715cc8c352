//! Record once, replay forever: wrap any client in a recorder that writes
//! one fixture file per distinct request, then rerun the same workload
//! offline from the fixtures and get byte-identical responses.
//!
//! ```text
//! cargo run --example record_and_replay
//! ```

#[allow(dead_code)]
#[path = "support/scripted.rs"]
mod scripted;

use std::fs;
use std::sync::Arc;

use cds::gateway::replay::{RecordingClient, ReplayClient};
use cds::gateway::templates::{template_id, TemplateStore};
use cds::gateway::{request_digest, ChatRequest, Gateway, Message, SamplingParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::path::Path::new("target/examples/record_and_replay/fixtures");
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }

    // Build the same requests the evaluation stage would issue: one
    // solve prompt per corpus question.
    let templates = TemplateStore::builtin();
    let solve_id = template_id("evaluate", cds::corpus::TaskKind::Math);
    let mut requests = Vec::new();
    for sample in scripted::corpus().into_iter().take(4) {
        let vars = std::collections::BTreeMap::from([("question", sample.question.clone())]);
        let prompt = templates.render(&solve_id, &vars)?;
        requests.push(ChatRequest::new(
            vec![Message::user(prompt)],
            SamplingParams::evaluation(),
            1,
        )?);
    }

    // Pass 1: the recorder forwards to the live client (scripted here,
    // HTTP in production) and writes a fixture per request digest.
    let recorder = RecordingClient::new(
        Box::new(scripted::ScriptedModel::new(scripted::STUDENT_ID)),
        dir,
    )?;
    let live = Gateway::new(Arc::new(recorder));
    let mut recorded = Vec::new();
    for request in &requests {
        recorded.push(live.complete(request)?);
    }
    let fixture_count = fs::read_dir(dir)?.count();
    println!("recorded {} responses into {} fixture file(s):", recorded.len(), fixture_count);
    for request in &requests {
        println!("  {}.json", &request_digest(request)[..16]);
    }

    // Pass 2: no live client at all. The replay client resolves each
    // request by digest; an unseen request is an error, never a guess.
    let offline = Gateway::new(Arc::new(ReplayClient::open(dir)?));
    let mut identical = true;
    for (request, original) in requests.iter().zip(&recorded) {
        let replayed = offline.complete(request)?;
        let same = replayed.completions == original.completions
            && replayed.model_id == original.model_id;
        identical &= same;
        println!(
            "  replayed {} -> {}",
            &request_digest(request)[..16],
            if same { "identical" } else { "DIFFERS" }
        );
    }
    assert!(identical, "replayed responses must match the recording");
    println!("all replayed responses byte-identical to the recording");

    // A request that was never recorded fails loudly.
    let unseen = ChatRequest::new(
        vec![Message::user("Solve the math problem below.\n\nQuestion:\nWhat is 1 + 1?")],
        SamplingParams::evaluation(),
        1,
    )?;
    match offline.complete(&unseen) {
        Err(err) => println!("\nunseen request refused as expected: {err}"),
        Ok(_) => panic!("replay must not invent responses"),
    }
    Ok(())
}
