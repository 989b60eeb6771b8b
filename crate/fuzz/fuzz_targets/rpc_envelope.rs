#![no_main]
use libfuzzer_sys::fuzz_target;
use qctrl_net::rpc::{dispatch_line, Handler, RpcError};
use serde_json::Value;

struct Echo;

impl Handler for Echo {
    fn target(&self) -> &str {
        "echo"
    }

    fn handle(&self, method: &str, params: Value) -> Result<Value, RpcError> {
        match method {
            "echo" => Ok(params),
            _ => Err(RpcError::new("unknown-method", method)),
        }
    }
}

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else {
        return;
    };
    let reply = dispatch_line(&Echo, line);
    assert!(!reply.contains('\n'));
    let v: Value = serde_json::from_str(&reply).expect("reply is JSON");
    assert!(v.get("result").is_some() != v.get("error").is_some());
});
