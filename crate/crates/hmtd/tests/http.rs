mod common;

use std::net::{SocketAddr, TcpListener};
use std::path::Path;
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use hmtd::clock::Clock;
use hmtd::http::{bind, ServeConfig};
use hmtd::{Hmtd, ServiceConfig, ServiceError};
use hmtd_core::context::Connectivity;
use hmtd_core::prescription::SessionId;
use hmtd_core::Minutes;
use serde_json::{json, Value};
use tokio::sync::oneshot;

use common::{request, seeded_data_dir, HttpReply};

struct TestServer {
    addr: SocketAddr,
    hmtd: Arc<Hmtd>,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl TestServer {
    fn start(data: &Path) -> Self {
        let config = ServeConfig {
            addr: "127.0.0.1:0".parse().unwrap(),
            service: ServiceConfig {
                data_dir: data.to_path_buf(),
                clock: Clock::logical(Minutes(14_088_000), 1),
                connectivity: Connectivity::Online,
            },
        };
        let (ready_tx, ready_rx) = mpsc::channel();
        let (stop, stopped) = oneshot::channel::<()>();
        let thread = thread::spawn(move || {
            let runtime = tokio::runtime::Runtime::new().unwrap();
            runtime.block_on(async move {
                let server = bind(config).await.unwrap();
                ready_tx.send((server.local_addr(), server.hmtd())).unwrap();
                server
                    .run_until(async {
                        let _ = stopped.await;
                    })
                    .await
                    .unwrap();
            });
        });
        let (addr, hmtd) = ready_rx.recv().unwrap();
        TestServer { addr, hmtd, stop: Some(stop), thread: Some(thread) }
    }

    fn call(&self, method: &str, path: &str, body: Option<Value>) -> HttpReply {
        request(self.addr, method, path, body.as_ref())
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}

fn assert_error(reply: &HttpReply, status: u16, code: &str) {
    assert_eq!(reply.status, status, "{:?}", reply.body);
    assert_eq!(reply.body["code"], code, "{:?}", reply.body);
    assert!(reply.body["message"].is_string());
    assert!(reply.body.get("detail").is_some());
}

/// Session 115 on workflow 1, bound to machine 42.
fn bound_session(server: &TestServer) -> u64 {
    let created = server.call("POST", "/sessions", Some(json!({"badge-id": 1001, "workflow-id": 1})));
    assert_eq!(created.status, 201, "{:?}", created.body);
    let id = created.body["session-id"].as_u64().unwrap();
    let bound = server.call("POST", &format!("/sessions/{id}/bind"), Some(json!({"machine-id": 42})));
    assert_eq!(bound.status, 200, "{:?}", bound.body);
    assert_eq!(bound.body["phase"], "InProgress");
    id
}

fn scan(server: &TestServer, id: u64, kind: &str, tag: u32) -> HttpReply {
    server.call("POST", &format!("/sessions/{id}/scan"), Some(json!({"kind": kind, "tag-id": tag})))
}

#[test]
fn health_and_unknown_routes() {
    let data = seeded_data_dir();
    let server = TestServer::start(data.path());
    let health = server.call("GET", "/health", None);
    assert_eq!(health.status, 200);
    assert_eq!(health.body["status"], "ok");
    assert_eq!(server.call("GET", "/workflows", None).body.as_array().unwrap().len(), 3);
    assert_error(&server.call("GET", "/nowhere", None), 404, "NotFound");
}

#[test]
fn occupied_port_is_a_bind_failure() {
    let data = seeded_data_dir();
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let config = ServeConfig {
        addr: taken.local_addr().unwrap(),
        service: ServiceConfig {
            data_dir: data.path().to_path_buf(),
            clock: Clock::Wall,
            connectivity: Connectivity::Online,
        },
    };
    let runtime = tokio::runtime::Runtime::new().unwrap();
    let err = runtime.block_on(bind(config)).err().expect("bind must fail");
    assert!(matches!(err, ServiceError::BindFailure(_)), "{err:?}");
    assert_eq!(err.code(), "BindFailure");
}

#[test]
fn session_endpoints_and_error_contract() {
    let data = seeded_data_dir();
    let server = TestServer::start(data.path());

    assert_error(&server.call("POST", "/sessions", Some(json!({"badge-id": 1002, "workflow-id": 1}))), 403, "Unqualified");
    assert_error(&server.call("POST", "/sessions", Some(json!({"badge-id": 4242, "workflow-id": 1}))), 404, "UnknownBadge");
    assert_error(&server.call("POST", "/sessions", Some(json!({"badge-id": 1001}))), 400, "BadRequest");
    assert_error(&server.call("GET", "/sessions/999", None), 404, "UnknownSession");
    assert_error(&scan(&server, 999, "Tool", 100), 404, "UnknownSession");

    let created = server.call("POST", "/sessions", Some(json!({"badge-id": 1001, "workflow-id": 1})));
    assert_eq!(created.status, 201);
    assert_eq!(created.body["session-id"], 115);
    assert_eq!(created.body["phase"], "AwaitingMachine");
    assert_error(&server.call("POST", "/sessions/115/bind", Some(json!({"machine-id": 43}))), 409, "MachineMismatch");
    assert_error(&server.call("POST", "/sessions/115/bind", Some(json!({}))), 400, "BadRequest");
    let tag_file = data.path().join("tags").join("machine-42.tag");
    let bound = server.call("POST", "/sessions/115/bind", Some(json!({"machine-tag-file": tag_file})));
    assert_eq!(bound.status, 200, "{:?}", bound.body);
    assert_eq!(bound.body["next-expected"], json!({"kind": "Tool", "entity-id": 100, "step-index": 0}));

    let rejected = scan(&server, 115, "Part", 200);
    assert_eq!(rejected.status, 200);
    assert_eq!(rejected.body["result"], "Rejected");
    assert_eq!(rejected.body["reason"], "OutOfOrder");
    assert_eq!(rejected.body["step-cursor"], 0);
    assert_eq!(rejected.body["scan-substate"], "ExpectTool");

    let accepted = scan(&server, 115, "Tool", 100);
    assert_eq!(accepted.body["result"], "ToolAccepted");
    assert_eq!(accepted.body["scan-substate"], "ExpectPart");
    assert_eq!(scan(&server, 115, "Part", 200).body["result"], "PartAccepted-StepComplete");
    assert_error(&scan(&server, 115, "Gadget", 1), 422, "InvalidIdentity");

    assert_error(&server.call("POST", "/sessions/115/complete", None), 409, "IncompleteWorkflow");
    assert_error(
        &server.call("POST", "/sessions/115/defect", Some(json!({"part-id": 202, "replacement-id": 250}))),
        404,
        "UnknownPart",
    );
    let defect = server.call("POST", "/sessions/115/defect", Some(json!({"part-id": 200, "replacement-id": 250})));
    assert_eq!(defect.status, 200, "{:?}", defect.body);
    assert_eq!(defect.body["defect-count"], 1);

    for (kind, tag) in [("Tool", 101), ("Part", 201), ("Tool", 101), ("Part", 201), ("Tool", 100), ("Part", 250)] {
        assert_ne!(scan(&server, 115, kind, tag).body["result"], "Rejected");
    }
    let done = server.call("POST", "/sessions/115/complete", None);
    assert_eq!(done.status, 200, "{:?}", done.body);
    assert_eq!(done.body["record"]["outcome"], "CompletedWithReplacement");
    assert_eq!(done.body["synced"], true);
    assert_error(&scan(&server, 115, "Tool", 100), 409, "WrongPhase");

    let parts = server.call("GET", "/trace/parts/250", None);
    assert_eq!(parts.status, 200);
    let kinds: Vec<&str> = parts.body.as_array().unwrap().iter().map(|e| e["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["PartReplaced", "StepCompleted"]);
    let tools = server.call("GET", "/trace/tools/101", None);
    assert_eq!(tools.body.as_array().unwrap().len(), 2);

    let replayed = server.call("GET", "/sessions/115/replay", None);
    let live = server.call("GET", "/sessions/115", None);
    assert_eq!(replayed.body["phase"], "Completed");
    assert_eq!(replayed.body["replaced-parts"], live.body["replaced-parts"]);
    assert_eq!(replayed.body["step-cursor"], live.body["step-cursor"]);
}

#[test]
fn context_follows_connectivity() {
    let data = seeded_data_dir();
    let server = TestServer::start(data.path());
    let online = server.call("GET", "/machines/42/context?mode=online&badge-id=1001", None);
    assert_eq!(online.status, 200);
    assert_eq!(online.body["provenance"], "Server");
    assert_eq!(online.body["bundle"]["environment"]["history"].as_array().unwrap().len(), 14);
    let offline = server.call("GET", "/machines/42/context?mode=offline", None);
    assert_eq!(offline.body["provenance"], "TagOnly");
    let history = offline.body["bundle"]["environment"]["history"].as_array().unwrap().clone();
    assert_eq!(history, online.body["bundle"]["environment"]["history"].as_array().unwrap()[4..].to_vec());

    assert_eq!(server.call("PUT", "/connectivity", Some(json!({"mode": "offline"}))).status, 200);
    assert_eq!(server.call("GET", "/machines/42/context", None).body["provenance"], "TagOnly");
    assert_error(&server.call("GET", "/machines/42/context?mode=sideways", None), 400, "BadRequest");
    assert_error(&server.call("GET", "/machines/77/context?mode=online", None), 404, "TagNotFound");
}

#[test]
fn collaboration_round_trip_and_long_poll() {
    let data = seeded_data_dir();
    let server = TestServer::start(data.path());
    let id = bound_session(&server);
    assert_error(&server.call("POST", &format!("/sessions/{id}/assist"), Some(json!({"expert-id": "nobody"}))), 404, "ExpertUnavailable");
    let collab = server.call("POST", &format!("/sessions/{id}/assist"), Some(json!({"expert-id": "exp-1"})));
    assert_eq!(collab.status, 201, "{:?}", collab.body);
    let cid = collab.body["collab-id"].as_u64().unwrap();
    let indications = format!("/collab/{cid}/indications");

    let empty = Instant::now();
    let reply = server.call("GET", &format!("{indications}?after=0&wait=300"), None);
    assert_eq!(reply.body, json!([]));
    assert!(empty.elapsed() >= Duration::from_millis(300));

    let addr = server.addr;
    let path = format!("{indications}?after=0");
    let waiter = thread::spawn(move || {
        let started = Instant::now();
        let reply = request(addr, "GET", &path, None);
        (reply, started.elapsed())
    });
    thread::sleep(Duration::from_millis(400));
    let sent = server.call("POST", &indications, Some(json!({"kind": "Textual", "payload": {"text": "vis de gauche"}})));
    assert_eq!(sent.status, 201);
    assert_eq!(sent.body, json!({"seq": 1}));
    let (reply, waited) = waiter.join().unwrap();
    assert!(waited < Duration::from_secs(5), "long poll held for {waited:?}");
    assert_eq!(reply.body[0]["seq"], 1);
    assert_eq!(reply.body[0]["payload"]["text"], "vis de gauche");

    let graphical = json!({"kind": "Graphical", "payload": {"shape": "Arrow", "anchor-tag-id": 201, "label": "joint"}});
    assert_eq!(server.call("POST", &indications, Some(graphical)).body, json!({"seq": 2}));
    assert_error(&server.call("POST", &indications, Some(json!({"kind": "Textual", "payload": {"shape": "Arrow"}}))), 400, "MalformedIndication");
    let later = server.call("GET", &format!("{indications}?after=1"), None);
    assert_eq!(later.body.as_array().unwrap().len(), 1);
    assert_eq!(later.body[0]["kind"], "Graphical");

    assert_eq!(server.call("POST", &format!("/collab/{cid}/close"), None).status, 200);
    assert_error(
        &server.call("POST", &indications, Some(json!({"kind": "Oral", "payload": {"transcript": "trop tard"}}))),
        409,
        "SessionClosed",
    );
    assert_error(&server.call("GET", "/collab/99/indications", None), 404, "UnknownSession");
}

#[test]
fn concurrent_scans_on_one_session_are_serialized() {
    let data = seeded_data_dir();
    let server = TestServer::start(data.path());
    let id = bound_session(&server);
    let sequence = [("Tool", 100), ("Part", 200), ("Tool", 101), ("Part", 201), ("Tool", 101), ("Part", 201), ("Tool", 100), ("Part", 200)];
    let addr = server.addr;
    let workers: Vec<_> = (0..6)
        .map(|w| {
            thread::spawn(move || {
                let mut replies = Vec::new();
                for i in 0..sequence.len() {
                    let (kind, tag) = sequence[(i + w) % sequence.len()];
                    let body = json!({"kind": kind, "tag-id": tag});
                    let reply = request(addr, "POST", &format!("/sessions/{id}/scan"), Some(&body));
                    assert_eq!(reply.status, 200, "{:?}", reply.body);
                    replies.push(((kind, tag), reply.body));
                }
                replies
            })
        })
        .collect();
    let mut replies: Vec<((&str, u32), Value)> = workers.into_iter().flat_map(|w| w.join().unwrap()).collect();
    replies.sort_by_key(|(_, body)| body["seq"].as_u64().unwrap());
    let seqs: Vec<u64> = replies.iter().map(|(_, b)| b["seq"].as_u64().unwrap()).collect();
    assert!(seqs.windows(2).all(|w| w[0] < w[1]), "duplicate seq in {seqs:?}");

    // Oracle: the same scans applied one after another in seq order.
    let mut cursor = 0;
    let mut expect_part = false;
    let mut parts_accepted = 0;
    for ((kind, tag), body) in &replies {
        let next = sequence.get(2 * cursor + usize::from(expect_part));
        let accepted = next == Some(&(*kind, *tag));
        assert_eq!(body["result"] != "Rejected", accepted, "{kind} {tag}: {body}");
        if accepted {
            if expect_part {
                cursor += 1;
                parts_accepted += 1;
            }
            expect_part = !expect_part;
        }
        assert_eq!(body["step-cursor"], cursor);
    }
    let session = server.hmtd.session(SessionId(id as u32)).unwrap();
    assert_eq!(session.session.step_cursor(), parts_accepted);
    assert_eq!(server.hmtd.replay(SessionId(id as u32)).unwrap(), session.session);
}
