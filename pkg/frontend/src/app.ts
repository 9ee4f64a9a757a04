// Controller: wires the API client, view state and renderer. One mutation
// is in flight at a time; GET refreshes may race and the last write wins.

import { ApiClient } from "./api.js";
import {
  SessionView,
  emptyView,
  formatHash,
  parseHash,
} from "./state.js";
import { Handlers, render } from "./views.js";

const SESSION_KEY = "faultline-session";

export class App {
  view: SessionView = emptyView();
  private handlers: Handlers;

  constructor(
    private api: ApiClient,
    private root: HTMLElement,
    private storage: Pick<Storage, "getItem" | "setItem"> = sessionStorage,
  ) {
    this.handlers = {
      onSelectImage: (imageId) => void this.selectImage(imageId),
      onSelectAlt: (cAlt) => void this.showFaultline(cAlt),
      onAnswer: (index) => void this.answerQuiz(index),
      onRetry: () => void this.retry(),
    };
  }

  private draw(): void {
    render(this.root, this.view, this.handlers);
  }

  private syncHash(): void {
    const bundle = this.view.faultline?.bundle;
    window.location.hash = formatHash({
      sessionId: this.view.sessionId,
      imageId: this.view.currentImage,
      cAlt: bundle ? bundle.query.c_alt : null,
    });
  }

  private fail(message: string, retry: (() => void) | null): void {
    this.view.error = message;
    this.view.retry = retry;
    this.view.busy = false;
    this.draw();
  }

  async start(): Promise<void> {
    const fromHash = parseHash(window.location.hash);
    const stored = this.storage.getItem(SESSION_KEY);
    const sessionId = fromHash.sessionId ?? stored;
    try {
      if (sessionId) {
        this.view.sessionId = sessionId;
      } else {
        const session = await this.api.createSession();
        this.view.sessionId = session.session_id;
      }
      this.storage.setItem(SESSION_KEY, this.view.sessionId!);
      const images = await this.api.listImages();
      this.view.images = images.images;
      this.view.error = null;
      this.draw();
      if (fromHash.imageId) {
        await this.selectImage(fromHash.imageId);
        if (fromHash.cAlt) {
          await this.showFaultline(fromHash.cAlt);
        }
      }
    } catch {
      this.fail("Could not reach the explanation service.", () => this.start());
    }
  }

  async selectImage(imageId: string): Promise<void> {
    if (this.view.busy || !this.view.sessionId) return;
    try {
      const alts = await this.api.listAlts(this.view.sessionId, imageId);
      this.view.currentImage = imageId;
      this.view.alts = alts;
      this.view.faultline = null;
      this.view.quizResult = null;
      this.view.quizSubmitted = false;
      this.view.error = null;
      this.view.retry = null;
      this.syncHash();
      this.draw();
    } catch {
      this.fail(`Could not load alternates for ${imageId}.`, () =>
        this.selectImage(imageId),
      );
    }
  }

  async showFaultline(cAlt: string): Promise<void> {
    const { sessionId, currentImage } = this.view;
    if (this.view.busy || !sessionId || !currentImage) return;
    this.view.busy = true;
    this.draw();
    try {
      const response = await this.api.getFaultline(sessionId, currentImage, cAlt);
      this.view.faultline = response;
      this.view.quizResult = null;
      this.view.quizSubmitted = false;
      this.view.error = null;
      this.view.retry = null;
      this.view.busy = false;
      this.syncHash();
      this.draw();
    } catch {
      // no state mutation on failure; offer a retry
      this.view.busy = false;
      this.fail(`Could not fetch the ${cAlt} fault-line.`, () =>
        this.showFaultline(cAlt),
      );
    }
  }

  async answerQuiz(index: number): Promise<void> {
    const { sessionId, faultline } = this.view;
    if (this.view.busy || this.view.quizSubmitted) return;
    if (!sessionId || !faultline?.quiz) return;
    this.view.busy = true;
    this.draw();
    try {
      const result = await this.api.submitQuiz(
        sessionId,
        faultline.quiz.quiz_id,
        index,
      );
      this.view.quizResult = result;
      this.view.quizSubmitted = true;
      this.view.trust = await this.api.trustReport(sessionId);
      this.view.error = null;
      this.view.retry = null;
      this.view.busy = false;
      this.draw();
    } catch {
      this.view.busy = false;
      this.fail("Could not submit the answer.", () => this.answerQuiz(index));
    }
  }

  private retry(): void {
    const retry = this.view.retry;
    this.view.error = null;
    this.view.retry = null;
    if (retry) retry();
  }
}

export function boot(): App {
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app container");
  const app = new App(new ApiClient(""), root);
  void app.start();
  return app;
}
