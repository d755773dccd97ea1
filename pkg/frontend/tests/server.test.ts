// UI backend proxy: session gate in front, service API key injected
// upstream, bodies and streams passed through verbatim.

import http from "node:http";
import { AddressInfo } from "node:net";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { createUiServer } from "../server/server.js";

const API_KEY = "uikey0001.proxy-test-secret";
const PASSWORD = "open-sesame";

let upstream: http.Server;
let upstreamSeen: { path: string; auth: string | undefined; body: string }[] = [];
let ui: http.Server;
let uiBase = "";

beforeAll(async () => {
  upstream = http.createServer((req, res) => {
    let body = "";
    req.on("data", (chunk) => (body += chunk));
    req.on("end", () => {
      upstreamSeen.push({ path: req.url ?? "", auth: req.headers.authorization, body });
      if (req.url?.endsWith("/stream")) {
        res.writeHead(200, { "Content-Type": "text/event-stream" });
        res.write("id: 1\nevent: run_started\ndata: {}\n\n");
        res.write("id: 2\nevent: run_completed\ndata: {\"state\":\"completed\"}\n\n");
        res.end();
        return;
      }
      res.writeHead(200, { "Content-Type": "application/json" });
      res.end(JSON.stringify({ ok: true, echo: body || null }));
    });
  });
  await new Promise<void>((resolve) => upstream.listen(0, "127.0.0.1", resolve));
  const upstreamPort = (upstream.address() as AddressInfo).port;

  const app = createUiServer({
    upstreamBase: `http://127.0.0.1:${upstreamPort}`,
    apiKey: API_KEY,
    instructorPassword: PASSWORD,
  });
  ui = http.createServer(app);
  await new Promise<void>((resolve) => ui.listen(0, "127.0.0.1", resolve));
  uiBase = `http://127.0.0.1:${(ui.address() as AddressInfo).port}`;
});

afterAll(async () => {
  await new Promise((resolve) => ui.close(resolve));
  await new Promise((resolve) => upstream.close(resolve));
});

async function login(): Promise<string> {
  const resp = await fetch(`${uiBase}/login`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ password: PASSWORD }),
  });
  expect(resp.status).toBe(200);
  const cookie = resp.headers.get("set-cookie")!;
  return cookie.split(";")[0];
}

describe("instructor UI backend", () => {
  it("rejects /v1 without a session", async () => {
    const resp = await fetch(`${uiBase}/v1/models`);
    expect(resp.status).toBe(401);
    expect((await resp.json()).code).toBe("unauthorized");
  });

  it("rejects bad passwords", async () => {
    const resp = await fetch(`${uiBase}/login`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ password: "wrong" }),
    });
    expect(resp.status).toBe(401);
  });

  it("proxies authenticated requests with the service key, never exposing it", async () => {
    const cookie = await login();
    upstreamSeen = [];
    const resp = await fetch(`${uiBase}/v1/models`, { headers: { cookie } });
    expect(resp.status).toBe(200);
    expect(upstreamSeen[0].path).toBe("/v1/models");
    expect(upstreamSeen[0].auth).toBe(`Bearer ${API_KEY}`);
    const text = JSON.stringify(await resp.json());
    expect(text).not.toContain(API_KEY);
  });

  it("forwards JSON bodies verbatim", async () => {
    const cookie = await login();
    upstreamSeen = [];
    await fetch(`${uiBase}/v1/runs`, {
      method: "POST",
      headers: { cookie, "Content-Type": "application/json" },
      body: JSON.stringify({ traits: ["DEV"], assignment_id: "a1" }),
    });
    expect(JSON.parse(upstreamSeen[0].body)).toEqual({ traits: ["DEV"], assignment_id: "a1" });
  });

  it("streams SSE bodies through", async () => {
    const cookie = await login();
    const resp = await fetch(`${uiBase}/v1/runs/r1/stream`, { headers: { cookie } });
    expect(resp.headers.get("content-type")).toContain("text/event-stream");
    const text = await resp.text();
    expect(text).toContain("event: run_started");
    expect(text).toContain("event: run_completed");
  });
});
