// UI backend: holds the scoring-service API key, gives browsers a cookie
// session instead, and proxies /v1/* verbatim (including SSE streams).
// Instructors never touch the scoring API or its key directly.

import crypto from "node:crypto";
import express from "express";
import path from "node:path";
import { fileURLToPath, pathToFileURL } from "node:url";

export interface UiServerOptions {
  upstreamBase: string; // e.g. http://127.0.0.1:8000
  apiKey: string; // service key held server-side only
  instructorPassword: string;
  staticDir?: string;
  distDir?: string; // compiled client modules, mounted at /dist
}

export function createUiServer(opts: UiServerOptions): express.Express {
  const app = express();
  const sessions = new Set<string>();

  app.use(express.json({ limit: "1mb" }));

  app.post("/login", (req, res) => {
    const password = (req.body ?? {}).password;
    if (typeof password !== "string" || password !== opts.instructorPassword) {
      res.status(401).json({ code: "unauthorized", message: "bad credentials", details: {} });
      return;
    }
    const token = crypto.randomBytes(24).toString("hex");
    sessions.add(token);
    res.cookie?.("ui_session", token); // express 5: cookie() exists without cookie-parser
    res.setHeader("Set-Cookie", `ui_session=${token}; HttpOnly; Path=/; SameSite=Strict`);
    res.json({ ok: true });
  });

  function sessionToken(req: express.Request): string | null {
    const cookie = req.headers.cookie ?? "";
    const match = /(?:^|;\s*)ui_session=([a-f0-9]+)/.exec(cookie);
    return match ? match[1] : null;
  }

  app.use("/v1", (req, res, next) => {
    const token = sessionToken(req);
    if (!token || !sessions.has(token)) {
      res.status(401).json({ code: "unauthorized", message: "login required", details: {} });
      return;
    }
    next();
  });

  // verbatim proxy: same paths, same bodies, same streaming semantics
  app.use("/v1", (req, res) => {
    const upstreamUrl = new URL(req.originalUrl, opts.upstreamBase);
    const headers: Record<string, string> = {
      authorization: `Bearer ${opts.apiKey}`,
    };
    for (const name of ["content-type", "accept", "last-event-id"]) {
      const value = req.headers[name];
      if (typeof value === "string") headers[name] = value;
    }
    const body =
      req.method === "GET" || req.method === "HEAD"
        ? undefined
        : req.headers["content-type"]?.includes("application/json")
          ? JSON.stringify(req.body)
          : req;
    fetch(upstreamUrl, {
      method: req.method,
      headers,
      body: body as BodyInit | undefined,
      // @ts-expect-error undici needs duplex for streamed request bodies
      duplex: body !== undefined && typeof body !== "string" ? "half" : undefined,
    })
      .then(async (upstream) => {
        res.status(upstream.status);
        for (const name of ["content-type", "cache-control", "retry-after"]) {
          const value = upstream.headers.get(name);
          if (value) res.setHeader(name, value);
        }
        if (!upstream.body) {
          res.end();
          return;
        }
        const reader = upstream.body.getReader();
        res.flushHeaders?.();
        for (;;) {
          const { done, value } = await reader.read();
          if (done) break;
          res.write(Buffer.from(value));
          (res as unknown as { flush?: () => void }).flush?.();
        }
        res.end();
      })
      .catch((err) => {
        if (!res.headersSent) {
          res
            .status(502)
            .json({ code: "upstream_unreachable", message: String(err), details: {} });
        } else {
          res.end();
        }
      });
  });

  if (opts.distDir) {
    app.use("/dist", express.static(opts.distDir));
  }
  if (opts.staticDir) {
    app.use(express.static(opts.staticDir));
    app.get("/", (_req, res) => res.sendFile(path.join(opts.staticDir!, "index.html")));
  }
  return app;
}

function main(): void {
  const upstreamBase = process.env.SCORING_SERVER ?? "http://127.0.0.1:8000";
  const apiKey = process.env.SCORING_API_KEY ?? "";
  const password = process.env.INSTRUCTOR_PASSWORD ?? "instructor";
  const port = Number(process.env.PORT ?? 3000);
  if (!apiKey) {
    console.error("SCORING_API_KEY is required (issue one with: traitmark keys issue)");
    process.exit(1);
  }
  const here = path.dirname(fileURLToPath(import.meta.url));
  const staticDir = path.resolve(here, "..", "..", "public");
  const distDir = path.resolve(here, "..");
  const app = createUiServer({
    upstreamBase,
    apiKey,
    instructorPassword: password,
    staticDir,
    distDir,
  });
  app.listen(port, () => {
    console.log(`instructor UI on http://127.0.0.1:${port} -> ${upstreamBase}`);
  });
}

if (process.argv[1] && import.meta.url === pathToFileURL(process.argv[1]).href) {
  main();
}
