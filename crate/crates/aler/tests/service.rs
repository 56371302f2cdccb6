use std::sync::Arc;
use std::thread;
use std::time::Duration;

use aler::service::{self, HttpOracle, QueueError, TaskQueue, TaskStatus};
use aler_core::{CandidatePair, Oracle, Progress, Provenance, Record, RecordCollection};
use serde_json::Value;

fn records(prefix: &str, n: usize) -> RecordCollection {
    RecordCollection::from_records(
        vec!["title".into(), "brand".into()],
        (0..n).map(|i| Record { id: format!("{prefix}{i}"), values: vec![format!("item {i}"), String::new()] }).collect(),
    )
    .unwrap()
}

fn pairs(n: usize) -> Vec<CandidatePair> {
    (0..n).map(|i| CandidatePair::new(format!("r{i}"), format!("s{i}"))).collect()
}

#[test]
fn enqueue_assigns_consecutive_ids_and_payloads() {
    let q = TaskQueue::new(None);
    let (r, s) = (records("r", 5), records("s", 5));
    let ids = q.enqueue_tasks(&pairs(4), &r, &s, Provenance::Seed).unwrap();
    assert_eq!(ids, [1, 2, 3, 4]);
    let t = q.task(2).unwrap();
    assert_eq!((t.r_id.as_str(), t.s_id.as_str()), ("r1", "s1"));
    assert_eq!(t.r[0].name, "title");
    assert_eq!(t.s[1].value, "");
    assert_eq!(t.status, TaskStatus::Pending);
    assert_eq!(q.enqueue_tasks(&[], &r, &s, Provenance::Seed).unwrap(), Vec::<u64>::new());
    assert_eq!(q.pending(10).len(), 4);
}

#[test]
fn re_enqueue_of_pending_pair_names_it() {
    let q = TaskQueue::new(None);
    let (r, s) = (records("r", 3), records("s", 3));
    q.enqueue_tasks(&pairs(2), &r, &s, Provenance::Seed).unwrap();
    let e = q.enqueue_tasks(&pairs(1), &r, &s, Provenance::Validation).unwrap_err();
    assert_eq!(e, QueueError::AlreadyPending("r0".into(), "s0".into()));
    assert!(e.to_string().contains("r0"));
    assert_eq!(q.pending(10).len(), 2);
}

#[test]
fn submit_rules_and_budget() {
    let q = TaskQueue::new(Some(2));
    let (r, s) = (records("r", 3), records("s", 3));
    q.enqueue_tasks(&pairs(3), &r, &s, Provenance::Seed).unwrap();
    let ack = q.submit_label(1, 1).unwrap();
    assert_eq!((ack.consumed, ack.remaining), (1, Some(1)));
    assert_eq!(q.submit_label(1, 0), Err(QueueError::AlreadyAnswered(1)));
    assert_eq!(q.submit_label(999, 0), Err(QueueError::UnknownTask(999)));
    assert_eq!(q.submit_label(2, 7), Err(QueueError::BadLabel));
    assert_eq!(q.consumed(), 1);
    q.submit_label(2, 0).unwrap();
    assert_eq!(q.submit_label(3, 1), Err(QueueError::BudgetExhausted));
    assert_eq!(q.consumed(), 2);
    assert_eq!(q.task(1).unwrap().answer, Some(1));
}

#[test]
fn concurrent_submits_answer_exactly_once() {
    let q = Arc::new(TaskQueue::new(None));
    let (r, s) = (records("r", 50), records("s", 50));
    q.enqueue_tasks(&pairs(50), &r, &s, Provenance::Seed).unwrap();
    let handles: Vec<_> = (0..8)
        .map(|t| {
            let q = q.clone();
            thread::spawn(move || (1..=50u64).filter(|&id| q.submit_label(id, (t % 2) as u8).is_ok()).count())
        })
        .collect();
    let wins: usize = handles.into_iter().map(|h| h.join().unwrap()).sum();
    assert_eq!(wins, 50);
    assert_eq!(q.consumed(), 50);
    assert_eq!(q.answered_count(), 50);
}

fn oracle(q: &Arc<TaskQueue>, n: usize, timeout: Option<Duration>) -> HttpOracle {
    HttpOracle {
        queue: q.clone(),
        records_r: Arc::new(records("r", n)),
        records_s: Arc::new(records("s", n)),
        timeout,
    }
}

#[test]
fn http_oracle_blocks_until_answered() {
    let q = Arc::new(TaskQueue::new(None));
    let mut o = oracle(&q, 4, None);
    let labeler = {
        let q = q.clone();
        thread::spawn(move || {
            let mut done = 0;
            while done < 4 {
                for t in q.pending(10) {
                    q.submit_label(t.task_id, (t.task_id % 2) as u8).unwrap();
                    done += 1;
                }
                thread::sleep(Duration::from_millis(5));
            }
        })
    };
    let batch = o.label(&pairs(4), Provenance::Loop { chunk: 0, iteration: 1 }).unwrap();
    labeler.join().unwrap();
    assert_eq!(batch.answers, [Some(1), Some(0), Some(1), Some(0)]);
    assert!(!batch.exhausted && !batch.timed_out);
    assert_eq!(o.consumed(), 4);
}

#[test]
fn http_oracle_timeout_cancels_the_rest() {
    let q = Arc::new(TaskQueue::new(None));
    let mut o = oracle(&q, 3, Some(Duration::from_millis(150)));
    let q2 = q.clone();
    let h = thread::spawn(move || {
        thread::sleep(Duration::from_millis(30));
        q2.submit_label(1, 1).unwrap();
    });
    let batch = o.label(&pairs(3), Provenance::Seed).unwrap();
    h.join().unwrap();
    assert!(batch.timed_out);
    assert_eq!(batch.answers, [Some(1), None, None]);
    assert!(q.pending(10).is_empty());
    // the cancelled pairs can be asked again
    assert!(o.queue.enqueue_tasks(&pairs(3)[1..], &records("r", 3), &records("s", 3), Provenance::Seed).is_ok());
}

#[test]
fn http_oracle_reports_exhaustion() {
    let q = Arc::new(TaskQueue::new(Some(1)));
    let mut o = oracle(&q, 2, Some(Duration::from_secs(30)));
    let q2 = q.clone();
    let h = thread::spawn(move || {
        while q2.pending(1).is_empty() {
            thread::sleep(Duration::from_millis(2));
        }
        q2.submit_label(1, 0).unwrap();
    });
    let batch = o.label(&pairs(2), Provenance::Seed).unwrap();
    h.join().unwrap();
    assert!(batch.exhausted && !batch.timed_out);
    assert_eq!(batch.answers, [Some(0), None]);
}

fn get(url: &str) -> (u16, Value) {
    let mut r = ureq::get(url).config().http_status_as_error(false).build().call().unwrap();
    (r.status().as_u16(), r.body_mut().read_json().unwrap())
}

fn post(url: &str, body: &str, token: Option<&str>) -> (u16, Value) {
    let mut req = ureq::post(url).config().http_status_as_error(false).build().header("content-type", "application/json");
    if let Some(t) = token {
        req = req.header(service::TOKEN_HEADER, t);
    }
    let mut r = req.send(body).unwrap();
    (r.status().as_u16(), r.body_mut().read_json().unwrap())
}

#[test]
fn http_api_round_trip() {
    let q = Arc::new(TaskQueue::new(Some(10)));
    let static_dir = tempfile::tempdir().unwrap();
    std::fs::write(static_dir.path().join("index.html"), "<h1>console</h1>").unwrap();
    let server =
        service::spawn_server("127.0.0.1:0", service::router(q.clone(), None, Some(static_dir.path().to_path_buf())))
            .unwrap();
    let base = format!("http://{}", server.addr);
    q.enqueue_tasks(&pairs(4), &records("r", 4), &records("s", 4), Provenance::Loop { chunk: 1, iteration: 2 }).unwrap();
    q.set_progress(&Progress { chunk: 1, iteration: 2, f1_history: &[0.5, 0.7], consumed: 0 });

    let (code, tasks) = get(&format!("{base}/api/tasks?limit=3"));
    assert_eq!(code, 200);
    let tasks = tasks.as_array().unwrap();
    assert_eq!(tasks.len(), 3);
    assert_eq!(tasks[0]["task_id"], 1);
    assert_eq!(tasks[0]["r"][0]["name"], "title");
    assert_eq!(tasks[0]["provenance"], "loop-1-2");

    for (i, label) in [(1, 1), (2, 0), (3, 1), (4, 0)] {
        let (code, ack) = post(&format!("{base}/api/labels"), &format!(r#"{{"task_id":{i},"label":{label}}}"#), None);
        assert_eq!(code, 200, "{ack}");
        assert_eq!(ack["consumed"], i);
        assert_eq!(ack["remaining"], 10 - i);
    }
    let (code, err) = post(&format!("{base}/api/labels"), r#"{"task_id":1,"label":1}"#, None);
    assert_eq!(code, 409);
    assert!(err["error"].as_str().unwrap().contains("already answered"));
    let (code, _) = post(&format!("{base}/api/labels"), r#"{"task_id":999,"label":1}"#, None);
    assert_eq!(code, 404);
    let (code, err) = post(&format!("{base}/api/labels"), r#"{"task_id":"x"}"#, None);
    assert_eq!(code, 400);
    assert!(err["error"].is_string());

    let (code, status) = get(&format!("{base}/api/status"));
    assert_eq!(code, 200);
    assert_eq!(status["chunk"], 1);
    assert_eq!(status["iteration"], 2);
    assert_eq!(status["f1_history"], serde_json::json!([0.5, 0.7]));
    assert_eq!(status["budget"]["consumed"], 4);
    assert_eq!(status["budget"]["remaining"], 6);

    let page = ureq::get(&format!("{base}/")).call().unwrap().body_mut().read_to_string().unwrap();
    assert_eq!(page, "<h1>console</h1>");
    let (code, _) = get(&format!("{base}/../secret"));
    assert_ne!(code, 200);
    server.shutdown();
}

#[test]
fn token_is_enforced_when_configured() {
    let q = Arc::new(TaskQueue::new(None));
    q.enqueue_tasks(&pairs(1), &records("r", 1), &records("s", 1), Provenance::Seed).unwrap();
    let server = service::spawn_server("127.0.0.1:0", service::router(q.clone(), Some("sekrit".into()), None)).unwrap();
    let base = format!("http://{}", server.addr);
    let (code, _) = get(&format!("{base}/api/status"));
    assert_eq!(code, 401);
    let (code, _) = post(&format!("{base}/api/labels"), r#"{"task_id":1,"label":1}"#, Some("nope"));
    assert_eq!(code, 401);
    let (code, _) = post(&format!("{base}/api/labels"), r#"{"task_id":1,"label":1}"#, Some("sekrit"));
    assert_eq!(code, 200);
    assert_eq!(q.consumed(), 1);
}
