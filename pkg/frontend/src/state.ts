// Client-side view state: a mirror of server responses plus navigation
// pointers. Everything numeric is a verbatim copy of a server payload.

import type {
  AltsResponse,
  FaultLineResponse,
  ImageInfo,
  QuizResult,
  TrustReport,
} from "./api.js";

export interface SessionView {
  sessionId: string | null;
  images: ImageInfo[];
  currentImage: string | null;
  alts: AltsResponse | null;
  faultline: FaultLineResponse | null;
  quizResult: QuizResult | null;
  quizSubmitted: boolean;
  trust: TrustReport | null;
  busy: boolean;
  error: string | null;
  retry: (() => void) | null;
}

export function emptyView(): SessionView {
  return {
    sessionId: null,
    images: [],
    currentImage: null,
    alts: null,
    faultline: null,
    quizResult: null,
    quizSubmitted: false,
    trust: null,
    busy: false,
    error: null,
    retry: null,
  };
}

// Navigation state lives in the URL hash so a full reload can rebuild the
// identical view from the session token alone.
export interface HashState {
  sessionId: string | null;
  imageId: string | null;
  cAlt: string | null;
}

export function parseHash(hash: string): HashState {
  const parts = hash.replace(/^#\/?/, "").split("/").filter(Boolean);
  const state: HashState = { sessionId: null, imageId: null, cAlt: null };
  for (let i = 0; i + 1 < parts.length; i += 2) {
    const value = decodeURIComponent(parts[i + 1]);
    if (parts[i] === "session") state.sessionId = value;
    if (parts[i] === "image") state.imageId = value;
    if (parts[i] === "alt") state.cAlt = value;
  }
  return state;
}

export function formatHash(state: HashState): string {
  const parts: string[] = [];
  if (state.sessionId) parts.push("session", encodeURIComponent(state.sessionId));
  if (state.imageId) parts.push("image", encodeURIComponent(state.imageId));
  if (state.cAlt) parts.push("alt", encodeURIComponent(state.cAlt));
  return parts.length ? `#/${parts.join("/")}` : "";
}
