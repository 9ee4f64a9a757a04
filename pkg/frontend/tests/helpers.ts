// Shared harness: a fetch mock wired to payloads recorded from the real
// service, and a DOM bootstrapper for the app.

import { ApiClient, FetchLike } from "../src/api.js";
import { App } from "../src/app.js";

import sessionFixture from "./fixtures/session.json";
import imagesFixture from "./fixtures/images.json";
import altsFixture from "./fixtures/alts.json";
import faultlineFixture from "./fixtures/faultline.json";
import faultlineNoflipFixture from "./fixtures/faultline_noflip.json";
import quizResultFixture from "./fixtures/quiz_result.json";
import trustFixture from "./fixtures/trust.json";

export const fixtures = {
  session: sessionFixture,
  images: imagesFixture,
  alts: altsFixture,
  faultline: faultlineFixture,
  faultlineNoflip: faultlineNoflipFixture,
  quizResult: quizResultFixture,
  trust: trustFixture,
};

export type Route = {
  status?: number;
  body: unknown | ((init?: RequestInit) => unknown);
};

export function mockFetch(
  routes: Record<string, Route>,
  log: string[] = [],
): FetchLike {
  return async (input: string, init?: RequestInit) => {
    const method = init?.method ?? "GET";
    const key = `${method} ${input}`;
    log.push(key);
    const route = routes[key];
    if (!route) {
      return new Response(
        JSON.stringify({ code: "not-found", message: `no route ${key}` }),
        { status: 404, headers: { "Content-Type": "application/json" } },
      );
    }
    const body =
      typeof route.body === "function"
        ? (route.body as (init?: RequestInit) => unknown)(init)
        : route.body;
    return new Response(JSON.stringify(body), {
      status: route.status ?? 200,
      headers: { "Content-Type": "application/json" },
    });
  };
}

export function standardRoutes(): Record<string, Route> {
  const sid = fixtures.session.session_id;
  const quizId = fixtures.faultline.quiz.quiz_id;
  return {
    "POST /sessions": { body: fixtures.session },
    "GET /images": { body: fixtures.images },
    [`GET /sessions/${sid}/images/goat_000/alts`]: { body: fixtures.alts },
    [`POST /sessions/${sid}/faultline`]: {
      body: (init?: RequestInit) => {
        const payload = JSON.parse(String(init?.body ?? "{}"));
        return payload.c_alt === "Frog"
          ? fixtures.faultlineNoflip
          : fixtures.faultline;
      },
    },
    [`POST /sessions/${sid}/quiz/${quizId}`]: { body: fixtures.quizResult },
    [`GET /sessions/${sid}/trust`]: { body: fixtures.trust },
  };
}

class MemoryStorage {
  private map = new Map<string, string>();
  getItem(key: string): string | null {
    return this.map.get(key) ?? null;
  }
  setItem(key: string, value: string): void {
    this.map.set(key, value);
  }
}

export function makeApp(fetchFn: FetchLike): { app: App; root: HTMLElement } {
  document.body.innerHTML = '<div id="app"></div>';
  window.location.hash = "";
  const root = document.getElementById("app")!;
  const app = new App(new ApiClient("", fetchFn), root, new MemoryStorage());
  return { app, root };
}

export async function flush(): Promise<void> {
  for (let i = 0; i < 4; i += 1) {
    await new Promise((resolve) => setTimeout(resolve, 0));
  }
}

export function click(root: HTMLElement, selector: string): void {
  const node = root.querySelector<HTMLElement>(selector);
  if (!node) throw new Error(`nothing matches ${selector}`);
  node.click();
}
