/** Portal settings, persisted in browser storage across navigations. */

const GATEWAY_KEY = "geps.gateway.url";
const POLL_KEY = "geps.poll.ms";

export const DEFAULT_POLL_MS = 2000;

function defaultGateway(): string {
  // When served by the gateway itself (under /portal) talk to the origin;
  // as a bare file, fall back to the standard local gateway port.
  if (typeof window !== "undefined" && window.location.protocol.startsWith("http")) {
    return window.location.origin;
  }
  return "http://127.0.0.1:7745";
}

export function gatewayUrl(): string {
  return localStorage.getItem(GATEWAY_KEY) ?? defaultGateway();
}

export function setGatewayUrl(url: string): void {
  localStorage.setItem(GATEWAY_KEY, url.replace(/\/+$/, ""));
}

export function pollIntervalMs(): number {
  const raw = localStorage.getItem(POLL_KEY);
  const value = raw === null ? NaN : Number(raw);
  return Number.isFinite(value) && value >= 250 ? value : DEFAULT_POLL_MS;
}

export function setPollIntervalMs(ms: number): void {
  localStorage.setItem(POLL_KEY, String(ms));
}
